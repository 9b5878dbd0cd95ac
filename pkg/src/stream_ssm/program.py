#!/usr/bin/python3

import os
import sys
import json
import signal
import logging
import argparse
from concurrent.futures import ThreadPoolExecutor

import stream_ssm.about as about
import stream_ssm.modules.configure as configure
from stream_ssm.modules.errors import EXIT_OK, EXIT_VERIFY_FAILED, EXIT_DATA, ConfigurationError, StreamError

from stream_ssm.modules.bench import run_bench, write_report
from stream_ssm.modules.checkpoint import load_checkpoint, save_checkpoint
from stream_ssm.modules.events import (
    EventAugmentConfig,
    read_events_binary,
    read_events_csv,
    write_events_binary,
    write_events_csv
)
from stream_ssm.modules.geometry import (
    read_points_binary,
    read_points_text,
    write_points_binary,
    write_points_text
)
from stream_ssm.modules.infer import run_stream
from stream_ssm.modules.model import ModelConfig
from stream_ssm.modules.numerics import make_rng
from stream_ssm.modules.scan import combine
from stream_ssm.modules.train import TrainConfig, make_gap_task, split_dataset, train_toy
from stream_ssm.modules.verify import SUITES, VerifyContext, faulty_combine, run_suite

logger = logging.getLogger(about.__package__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# ---------- Path to config file ----------
CONFIG_PATH = os.path.join(
    os.path.expanduser("~"),
    ".config",
    about.__package__,
    "config.json"
)

DEFAULT_CONTENT = {
    "seed": 0,
    "workers": None,
    "log_level": "INFO",
    "output_dir": "stream_ssm_run",

    # ---------------- Model ----------------
    "model": {
        "n": 8,
        "m": 4,
        "layers": 2,
        "subsample_schedule": [],
        "variant": "stream-00",
        "group_size": 32,
        "num_groups": 16,
        "classes": 2,
        "input": "events",
        "sensor_width": 2,
        "sensor_height": 2,
        "median_gap": 0.001,
        "norm": True,
        "final_norm": True
    },

    # ---------------- Optimization ----------------
    "train": {
        "lr": 0.003,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.0,
        "batch": 32,
        "epochs": 10,
        "grad_clip": 1.0,
        "warmup_steps": 0
    },

    "augment": {
        "flip_x_prob": 0.5,
        "flip_y_prob": 0.0,
        "translate_prob": 0.5,
        "max_shift": 1,
        "jitter_prob": 0.5,
        "jitter_range": [0.9, 1.1],
        "cutmix_prob": 0.0,
        "cutmix_ratio": [0.1, 0.5]
    },

    # ---------------- Synthetic gap task ----------------
    "data": {
        "train_size": 2000,
        "val_size": 500,
        "length": 128,
        "period_us": 1000,
        "jitter": 0.1
    },

    # ---------------- Subcommands ----------------
    "verify": {
        "suite": "all",
        "report": None
    },

    "bench": {
        "n": 65536,
        "channels": 64,
        "m": 4,
        "workers_list": [1, 2, 4],
        "repeats": 3,
        "precision": "double",
        "report": "bench_report.txt"
    },

    "infer": {
        "cadence": 100
    }
}


# ============================================================
# Subcommands
# ============================================================

def cmd_verify(args, config, workers, executor):
    suite = config["verify"]["suite"]
    if suite != "all" and suite not in SUITES:
        raise ConfigurationError(f"unknown suite '{suite}'")

    context = VerifyContext(workers, executor, combine=faulty_combine if args.inject_fault else combine)
    results = run_suite(suite, seed=config["seed"], context=context)
    lines = [result.format() for result in results]
    for line in lines:
        print(line)

    report = config["verify"]["report"]
    if report:
        with open(report, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    failed = sum(not result.passed for result in results)
    logger.info("%d of %d checks passed", len(results) - failed, len(results))
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def cmd_bench(args, config, workers, executor):
    bench = config["bench"]
    rows = run_bench(bench["n"], bench["channels"], bench["m"], bench["workers_list"],
                     repeats=bench["repeats"], precision=bench["precision"], seed=config["seed"])
    for row in rows:
        print(row.format())
    write_report(bench["report"], rows)
    return EXIT_OK


def cmd_train(args, config, workers, executor):
    model_config = ModelConfig.from_dict(config["model"])
    train_config = TrainConfig.from_dict({**config["train"], "seed": config["seed"]})
    augment = EventAugmentConfig.from_dict(config["augment"])
    data = config["data"]

    dataset = make_gap_task(make_rng(config["seed"], "data"), data["train_size"] + data["val_size"],
                            length=data["length"], period_us=data["period_us"], jitter=data["jitter"],
                            width=model_config.sensor_width, height=model_config.sensor_height)
    train_set, val_set = split_dataset(dataset, data["train_size"])

    out_dir = config["output_dir"]
    model, records = train_toy(model_config, train_config, train_set, val_set, out_dir,
                               augment=augment, workers=workers, executor=executor)

    checkpoint_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(checkpoint_path, model, extra={"seed": config["seed"]})
    configure.save_config(os.path.join(out_dir, "config.json"), config)
    print(f"checkpoint={checkpoint_path} metrics={os.path.join(out_dir, 'metrics.txt')}")
    return EXIT_OK


def cmd_infer(args, config, workers, executor):
    model = load_checkpoint(args.checkpoint)
    cadence = config["infer"]["cadence"]
    if args.source == "-":
        run_stream(model, sys.stdin.buffer, cadence=cadence, path="<stdin>")
    else:
        with open(args.source, "rb") as f:
            run_stream(model, f, cadence=cadence, path=args.source)
    return EXIT_OK


def cmd_convert(args, config, workers, executor):
    width = args.width or config["model"]["sensor_width"]
    height = args.height or config["model"]["sensor_height"]

    if args.format == "csv2bin":
        write_events_binary(args.output, read_events_csv(args.input, width, height))
    elif args.format == "bin2csv":
        write_events_csv(args.output, read_events_binary(args.input))
    elif args.format == "txt2bin":
        write_points_binary(args.output, read_points_text(args.input))
    else:
        write_points_text(args.output, read_points_binary(args.input))
    logger.info("Converted %s to %s (%s)", args.input, args.output, args.format)
    return EXIT_OK


def cmd_about(args, config, workers, executor):
    print(f"{about.__program_name__} {about.__version__}")
    print(about.__description__)
    print(f"source: {about.__url_source__}")
    print(f"documentation: {about.__url_doc__}")
    print(f"bugs: {about.__url_bugs__}")
    return EXIT_OK


# ============================================================
# Arguments
# ============================================================

def _workers_list(text):
    try:
        return [int(value) for value in text.split(",") if value]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got '{text}'")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="seed of every random stream of the run")
    common.add_argument("--workers", type=int, help="size of the worker pool (default: logical cores)")
    common.add_argument("--config", help="JSON config file (default: ~/.config/stream_ssm/config.json)")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog=about.__program_name__, description=about.__description__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    sub = subparsers.add_parser("verify", parents=[common], help="run the property suites")
    sub.add_argument("--suite", choices=SUITES + ("all",))
    sub.add_argument("--out", help="also write the report to this file")
    sub.add_argument("--inject-fault", dest="inject_fault", action="store_true",
                     help="swap in a combine with one flipped sign")
    sub.set_defaults(handler=cmd_verify, overrides={"suite": "verify.suite", "out": "verify.report"})

    sub = subparsers.add_parser("bench", parents=[common], help="sequential vs parallel scan throughput")
    sub.add_argument("--n", type=int, help="sequence length")
    sub.add_argument("--channels", type=int)
    sub.add_argument("--m", type=int, help="state dimension")
    sub.add_argument("--workers-list", dest="workers_list", type=_workers_list, help="e.g. 1,2,4,8")
    sub.add_argument("--precision", choices=("double", "single"))
    sub.add_argument("--repeats", type=int)
    sub.add_argument("--out", help="report file")
    sub.set_defaults(handler=cmd_bench, overrides={
        "n": "bench.n", "channels": "bench.channels", "m": "bench.m", "workers_list": "bench.workers_list",
        "precision": "bench.precision", "repeats": "bench.repeats", "out": "bench.report"})

    sub = subparsers.add_parser("train", parents=[common], help="toy ablation training on the gap task")
    sub.add_argument("--n", type=int, help="feature width")
    sub.add_argument("--m", type=int, help="state dimension")
    sub.add_argument("--variant", help="mamba, stream-00, stream-0G, stream-D0 or stream-DG")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--out", help="output directory")
    sub.set_defaults(handler=cmd_train, overrides={
        "n": "model.n", "m": "model.m", "variant": "model.variant", "epochs": "train.epochs", "out": "output_dir"})

    sub = subparsers.add_parser("infer", parents=[common], help="streaming classification of an event file")
    sub.add_argument("checkpoint")
    sub.add_argument("source", help="native binary event file, or - for stdin")
    sub.add_argument("--cadence", type=int, help="emit posteriors every this many events")
    sub.set_defaults(handler=cmd_infer, overrides={"cadence": "infer.cadence"})

    sub = subparsers.add_parser("convert", parents=[common], help="convert event or point files")
    sub.add_argument("input")
    sub.add_argument("output")
    sub.add_argument("--format", required=True, choices=("csv2bin", "bin2csv", "txt2bin", "bin2txt"))
    sub.add_argument("--width", type=int, help="sensor width for CSV input")
    sub.add_argument("--height", type=int, help="sensor height for CSV input")
    sub.set_defaults(handler=cmd_convert, overrides={})

    sub = subparsers.add_parser("about", parents=[common], help="program information")
    sub.set_defaults(handler=cmd_about, overrides={})

    return parser


def resolve_config(args):
    """Defaults, then the config file, then command-line flags."""
    if args.config:
        config = configure.load_config(args.config, DEFAULT_CONTENT)
    else:
        config = configure.verify_default_config(CONFIG_PATH, default_content=DEFAULT_CONTENT)

    overrides = {"seed": args.seed, "workers": args.workers, "log_level": args.log_level}
    for flag, dotted in args.overrides.items():
        overrides[dotted] = getattr(args, flag)
    return configure.apply_overrides(config, overrides)


# ============================================================
# Main
# ============================================================

def main(argv=None):
    signal.signal(signal.SIGINT, signal.SIG_DFL)

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, stream=sys.stderr)

    try:
        config = resolve_config(args)
        try:
            logging.getLogger().setLevel(str(config["log_level"]).upper())
        except ValueError:
            raise ConfigurationError(f"unknown log level '{config['log_level']}'")
        logger.info("Resolved configuration: %s", json.dumps(config, sort_keys=True))

        workers = config["workers"]
        if workers is None:
            workers = os.cpu_count() or 1
        if workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {workers}")
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return args.handler(args, config, workers, executor)
    except StreamError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("%s: %s", e.filename, e.strerror)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
