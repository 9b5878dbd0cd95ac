import json

import pytest

from stream_ssm import program
from stream_ssm.modules.events import EventStream, make_events, write_events_binary


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "workers": 2,
        "model": {"n": 4, "m": 2, "layers": 1},
        "train": {"epochs": 1, "batch": 4},
        "data": {"train_size": 8, "val_size": 4, "length": 8},
    }))
    return str(path)


def run(*argv):
    return program.main(list(argv))


def test_about(capsys, config_file):
    assert run("about", "--config", config_file) == 0
    assert "stream-ssm" in capsys.readouterr().out


def test_convert_roundtrip(tmp_path, data_dir, config_file):
    source = f"{data_dir}/events_10.csv"
    binary = str(tmp_path / "events.bin")
    back = tmp_path / "events.csv"
    assert run("convert", source, binary, "--format", "csv2bin", "--width", "4", "--height", "3",
               "--config", config_file) == 0
    assert run("convert", binary, str(back), "--format", "bin2csv", "--config", config_file) == 0
    with open(source, "rb") as f:
        assert back.read_bytes() == f.read()


def test_convert_points(tmp_path, data_dir, config_file):
    binary = str(tmp_path / "cloud.bin")
    back = tmp_path / "cloud.txt"
    assert run("convert", f"{data_dir}/cloud_5.txt", binary, "--format", "txt2bin", "--config", config_file) == 0
    assert run("convert", binary, str(back), "--format", "bin2txt", "--config", config_file) == 0
    with open(f"{data_dir}/cloud_5.txt", "rb") as f:
        assert back.read_bytes() == f.read()


def test_data_errors_exit_3(tmp_path, config_file):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,x,y,p\n1,9,0,0\n")
    assert run("convert", str(bad), str(tmp_path / "out.bin"), "--format", "csv2bin", "--config", config_file) == 3
    assert run("convert", str(tmp_path / "missing.csv"), str(tmp_path / "out.bin"), "--format", "csv2bin",
               "--config", config_file) == 3


def test_usage_errors_exit_2(tmp_path, config_file):
    with pytest.raises(SystemExit) as info:
        run("verify", "--suite", "nonsense", "--config", config_file)
    assert info.value.code == 2
    assert run("verify", "--suite", "ssm", "--config", str(tmp_path / "missing.json")) == 2
    assert run("verify", "--suite", "ssm", "--workers", "0", "--config", config_file) == 2


def test_verify(tmp_path, capsys, config_file):
    report = tmp_path / "report.txt"
    assert run("verify", "--suite", "ssm", "--seed", "7", "--out", str(report), "--config", config_file) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.endswith("status=PASS") for line in out)
    assert report.read_text().splitlines() == out


def test_verify_injected_fault_exits_1(config_file):
    assert run("verify", "--suite", "scan", "--inject-fault", "--config", config_file) == 1


def test_train_then_infer(tmp_path, capsys, config_file):
    out_dir = tmp_path / "run"
    assert run("train", "--out", str(out_dir), "--variant", "stream-DG", "--config", config_file) == 0
    assert (out_dir / "model.ckpt").exists()
    assert (out_dir / "metrics.txt").read_text().count("\n") == 2
    saved = json.loads((out_dir / "config.json").read_text())
    assert saved["model"]["variant"] == "stream-DG"
    capsys.readouterr()

    events = tmp_path / "events.bin"
    write_events_binary(events, EventStream(make_events([0, 100, 250, 900], [0, 1, 1, 0], [1, 0, 1, 0],
                                                        [0, 1, 1, 0]), 2, 2))
    assert run("infer", str(out_dir / "model.ckpt"), str(events), "--cadence", "2", "--config", config_file) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines] == ["event=2", "event=4", "summary"]

    wrong = tmp_path / "wrong.bin"
    write_events_binary(wrong, EventStream(make_events([0], [0], [0], [0]), 4, 4))
    assert run("infer", str(out_dir / "model.ckpt"), str(wrong), "--config", config_file) == 3
