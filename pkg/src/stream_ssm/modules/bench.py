#!/usr/bin/python3

"""Throughput of the sequential scan against the chunk-parallel scan."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from stream_ssm.modules.errors import ConfigurationError
from stream_ssm.modules.numerics import make_rng
from stream_ssm.modules.scan import PRECISIONS, ScanStats, leaf_pairs, scan_parallel, scan_sequential

logger = logging.getLogger(__name__)


@dataclass
class BenchRow:
    mode: str
    workers: int
    n: int
    channels: int
    m: int
    seconds: float
    speedup: float
    depth: int
    combines: int

    @property
    def tokens_per_second(self):
        return self.n / self.seconds if self.seconds > 0 else float("inf")

    def format(self):
        return (f"mode={self.mode} workers={self.workers} n={self.n} channels={self.channels} m={self.m} "
                f"seconds={self.seconds:.6f} tokens_per_second={self.tokens_per_second:.1f} "
                f"speedup={self.speedup:.3f} depth={self.depth} combines={self.combines}")


def bench_leaves(n, channels, m, rng, precision="double"):
    entries = -rng.uniform(0.05, 1.0, size=(channels, m)) + 1j * rng.uniform(-3.0, 3.0, size=(channels, m))
    delta = rng.exponential(0.1, size=(n, channels))
    b = rng.normal(size=(n, channels, m)) + 1j * rng.normal(size=(n, channels, m))
    u = rng.normal(size=(n, channels))
    return leaf_pairs(entries, delta, b, u, precision=precision)


def _best_time(run, repeats):
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        run()
        best = min(best, time.perf_counter() - started)
    return best


def run_bench(n, channels, m, workers_list, repeats=3, precision="double", seed=0):
    """Sequential row first, then one parallel row per worker count; best of ``repeats``."""
    if min(n, channels, m, repeats) < 1 or not workers_list or min(workers_list) < 1:
        raise ConfigurationError(
            f"benchmark sizes must be positive, got n={n}, channels={channels}, m={m}, workers={workers_list}")
    if precision not in PRECISIONS:
        raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}")

    leaves = bench_leaves(n, channels, m, make_rng(seed, "bench"), precision=precision)
    # compile the kernels outside the timed region
    scan_parallel(leaves[:min(n, 16)], 2)

    stats = ScanStats()
    scan_sequential(leaves, stats=stats)
    sequential = _best_time(lambda: scan_sequential(leaves), repeats)
    rows = [BenchRow("sequential", 1, n, channels, m, sequential, 1.0, stats.depth, stats.combines)]
    logger.info("%s", rows[0].format())

    for workers in workers_list:
        stats = ScanStats()
        with ThreadPoolExecutor(max_workers=workers) as executor:
            scan_parallel(leaves, workers, executor=executor, stats=stats)
            seconds = _best_time(lambda: scan_parallel(leaves, workers, executor=executor), repeats)
        row = BenchRow("parallel", workers, n, channels, m, seconds, sequential / seconds if seconds > 0 else np.inf,
                       stats.depth, stats.combines)
        logger.info("%s", row.format())
        rows.append(row)
    return rows


def write_report(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(row.format() + "\n")
