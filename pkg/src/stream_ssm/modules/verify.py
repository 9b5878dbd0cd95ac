#!/usr/bin/python3

"""
Property suites behind ``stream-ssm verify``.

Checks register themselves with ``@check(suite, name, tolerance)``; each
returns a measured error that passes when it does not exceed the tolerance.
Every check draws from its own named random stream, so a report depends only
on the seed.
"""

import cmath
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from stream_ssm.modules.checkpoint import load_checkpoint, save_checkpoint
from stream_ssm.modules.events import EventAugmentConfig, EventStream, event_cutmix, event_times, event_token_ids, \
    make_events
from stream_ssm.modules.geometry import AxisEmbedding, PointEncoder, fps, knn_group, serialize_points
from stream_ssm.modules.infer import StreamingClassifier
from stream_ssm.modules.model import ModelConfig, StreamModel
from stream_ssm.modules.numerics import central_difference, chi_square_homogeneity, make_rng, relative_error
from stream_ssm.modules.scan import ScanPair, ScanStats, adjoint_scan, combine, leaf_pairs, scan_parallel, \
    scan_sequential
from stream_ssm.modules.ssm_core import DiagonalMatrixA, apply_kernel_oracle, kernel_matrix, run_sequential, \
    step, SisoState, SisoStep, steps_from_arrays
from stream_ssm.modules.stream_layer import VARIANT_ROWS, StreamParams, TokenBatch, block_backward, block_forward, \
    discretize_stream, make_variant, mimo_forward, TokenSequence
from stream_ssm.modules.train import TrainConfig, AdamState, adam_step, cross_entropy, evaluate, make_gap_task, \
    split_dataset, token_histograms, train_toy

logger = logging.getLogger(__name__)

SUITES = ("ssm", "scan", "grad", "layer", "geometry", "train")

INVARIANT_MANIFEST = (
    ("ssm", "step_closed_form"),
    ("ssm", "kernel_oracle"),
    ("ssm", "causality"),
    ("ssm", "zero_gap_cumulative_sum"),
    ("ssm", "stability_bound"),
    ("ssm", "lti_convolution"),
    ("ssm", "time_translation"),
    ("ssm", "gap_scaling"),
    ("scan", "associativity"),
    ("scan", "identity"),
    ("scan", "combine_fold"),
    ("scan", "sequential_matches_recurrence"),
    ("scan", "parallel_matches_sequential"),
    ("scan", "parallel_single_worker_bitwise"),
    ("scan", "work_bound"),
    ("grad", "adjoint_leaves"),
    ("grad", "adjoint_checkpointed"),
    ("grad", "adjoint_zero"),
    ("grad", "adjoint_delta_closed_form"),
    ("grad", "layer_parameters"),
    ("grad", "stack_end_to_end"),
    ("layer", "channel_oracle"),
    ("layer", "zero_input_residual"),
    ("layer", "variant_rows"),
    ("layer", "timestamp_sensitivity"),
    ("layer", "translation_invariance"),
    ("layer", "overlap_robustness"),
    ("layer", "subsample_lengths"),
    ("layer", "single_layer_pooled"),
    ("layer", "streaming_replay"),
    ("layer", "checkpoint_roundtrip"),
    ("geometry", "serialize_permutation"),
    ("geometry", "serialize_segments"),
    ("geometry", "fps_oracle"),
    ("geometry", "fps_permutation"),
    ("geometry", "knn_oracle"),
    ("geometry", "token_ids_injective"),
    ("geometry", "cutmix_convex"),
    ("train", "cross_entropy_gradient"),
    ("train", "cross_entropy_uniform"),
    ("train", "adam_reference"),
    ("train", "gap_task_balance"),
    ("train", "token_histograms"),
    ("train", "determinism"),
    ("train", "lr_zero"),
    ("train", "loss_decrease"),
)


def faulty_combine(left: ScanPair, right: ScanPair) -> ScanPair:
    """``combine`` with the sign of the right b-component flipped."""
    return ScanPair(left.a * right.a, right.a * left.b - right.b)


@dataclass
class VerifyContext:
    workers: int = 1
    executor: object = None
    combine: Callable = field(default=combine)


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    tolerance: float
    func: Callable


@dataclass(frozen=True)
class CheckResult:
    suite: str
    check: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error)) and self.error <= self.tolerance

    def format(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"suite={self.suite} check={self.check} error={self.error:.3e} "
                f"tolerance={self.tolerance:.1e} status={status}")


_REGISTRY = {}


def check(suite, name, tolerance):
    def register(func):
        _REGISTRY.setdefault(suite, {})[name] = Check(suite, name, tolerance, func)
        return func
    return register


def registered_checks():
    return {(suite, name) for suite, checks in _REGISTRY.items() for name in checks}


def run_suite(suite, seed=0, context=None):
    """Runs one suite (or ``all``) and returns the results in registration order."""
    if suite != "all" and suite not in SUITES:
        raise ValueError(f"unknown suite '{suite}', expected one of {SUITES + ('all',)}")
    context = context or VerifyContext()
    results = []
    for name in SUITES if suite == "all" else (suite,):
        for entry in _REGISTRY.get(name, {}).values():
            rng = make_rng(seed, f"{entry.suite}.{entry.name}")
            try:
                error = float(entry.func(rng, context))
            except Exception:
                logger.exception("Check %s.%s raised", entry.suite, entry.name)
                error = float("inf")
            results.append(CheckResult(entry.suite, entry.name, error, entry.tolerance))
    return results


# ============================================================
# Shared instances
# ============================================================

def _random_A(rng, m, conjugate_pairs=False):
    entries = -rng.uniform(0.05, 1.0, size=m) + 1j * rng.uniform(-3.0, 3.0, size=m)
    return DiagonalMatrixA(entries, conjugate_pairs=conjugate_pairs)


def _random_arrays(rng, n, m):
    delta = rng.exponential(0.5, size=n)
    b = rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m))
    c = rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m))
    u = rng.normal(size=n)
    return delta, b, c, u


def _random_leaves(rng, n, m):
    A = _random_A(rng, m)
    delta, b, _, u = _random_arrays(rng, n, m)
    return leaf_pairs(A.entries, delta, b, u)


def _random_pair(rng, shape):
    a = rng.uniform(0.2, 1.0, size=shape) * np.exp(1j * rng.uniform(-np.pi, np.pi, size=shape))
    b = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    return ScanPair(a, b)


def _sorted_times(rng, batch, length, duplicate_every=0):
    gaps = rng.exponential(1.0, size=(batch, length))
    if duplicate_every:
        gaps[:, ::duplicate_every] = 0.0
    return np.cumsum(gaps, axis=1)


# ============================================================
# ssm
# ============================================================

@check("ssm", "step_closed_form", 1e-15)
def _step_closed_form(rng, context):
    A = DiagonalMatrixA([-1.0, -0.5])
    h = rng.normal(size=2) + 1j * rng.normal(size=2)
    b = rng.normal(size=2) + 1j * rng.normal(size=2)
    u = float(rng.normal())
    result = step(SisoState(h), A, SisoStep(0.3, b, np.ones(2), u)).h
    expected = [cmath.exp(A.entries[j] * 0.3) * h[j] + b[j] * u for j in range(2)]
    return relative_error(result, np.array(expected))


@check("ssm", "kernel_oracle", 1e-10)
def _kernel_oracle(rng, context):
    worst = 0.0
    for _ in range(20):
        n, m = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        A = _random_A(rng, m, conjugate_pairs=bool(rng.integers(0, 2)))
        steps = steps_from_arrays(*_random_arrays(rng, n, m))
        worst = max(worst, relative_error(run_sequential(A, steps), apply_kernel_oracle(A, steps)))
    return worst


@check("ssm", "causality", 0.0)
def _causality(rng, context):
    n, m = 32, 4
    A = _random_A(rng, m)
    delta, b, c, u = _random_arrays(rng, n, m)
    y = run_sequential(A, steps_from_arrays(delta, b, c, u))
    j = int(rng.integers(1, n))
    u[j] += 1.0
    perturbed = run_sequential(A, steps_from_arrays(delta, b, c, u))
    return float(np.max(np.abs(perturbed[:j] - y[:j])))


@check("ssm", "zero_gap_cumulative_sum", 1e-12)
def _zero_gap(rng, context):
    n, m = 24, 3
    A = _random_A(rng, m)
    _, b, c, u = _random_arrays(rng, n, m)
    y = run_sequential(A, steps_from_arrays(np.zeros(n), b, c, u))
    expected = np.sum(c * np.cumsum(b * u[:, None], axis=0), axis=1).real
    return relative_error(y, expected)


@check("ssm", "stability_bound", 1e-12)
def _stability(rng, context):
    n, m = 128, 4
    A = _random_A(rng, m)
    delta, b, c, u = _random_arrays(rng, n, m)
    h0 = SisoState(rng.normal(size=m) + 1j * rng.normal(size=m))
    _, states = run_sequential(A, steps_from_arrays(delta, b, c, u), h0=h0, return_states=True)
    # per state entry: |h_k| <= |h_0| + sum_i |b_i u_i|
    bound = np.abs(h0.h) + np.cumsum(np.abs(b * u[:, None]), axis=0)
    excess = np.max(np.abs(states) - bound)
    return max(0.0, float(excess)) / float(np.max(bound))


@check("ssm", "lti_convolution", 1e-12)
def _lti_convolution(rng, context):
    n, m = 16, 4
    A = _random_A(rng, m)
    delta, b, c, u = _random_arrays(rng, n, m)
    b = np.tile(b[0], (n, 1))
    c = np.tile(c[0], (n, 1))
    phi = kernel_matrix(A, steps_from_arrays(delta, b, c, u))
    times = np.cumsum(delta)
    expected = np.zeros((n, n))
    for k in range(n):
        for i in range(k + 1):
            expected[k, i] = np.sum(c[0] * np.exp(A.entries * (times[k] - times[i])) * b[0]).real
    return relative_error(phi, expected)


@check("ssm", "time_translation", 1e-12)
def _time_translation(rng, context):
    n, m = 32, 4
    A = _random_A(rng, m)
    _, b, c, u = _random_arrays(rng, n, m)
    t = np.sort(rng.uniform(0.0, 5.0, size=n))

    def outputs(times):
        delta = np.concatenate([[0.0], np.diff(times)])
        return run_sequential(A, steps_from_arrays(delta, b, c, u))

    return relative_error(outputs(t + 17.25), outputs(t))


@check("ssm", "gap_scaling", 1e-12)
def _gap_scaling(rng, context):
    n, m = 32, 4
    A = _random_A(rng, m)
    delta, b, c, u = _random_arrays(rng, n, m)
    scale = 2.5
    scaled = DiagonalMatrixA(A.entries / scale)
    return relative_error(run_sequential(scaled, steps_from_arrays(delta * scale, b, c, u)),
                          run_sequential(A, steps_from_arrays(delta, b, c, u)))


# ============================================================
# scan
# ============================================================

@check("scan", "associativity", 1e-13)
def _associativity(rng, context):
    op = context.combine
    p, q, r = (_random_pair(rng, (10000, 1)) for _ in range(3))
    left = op(op(p, q), r)
    right = op(p, op(q, r))
    return max(relative_error(left.a, right.a), relative_error(left.b, right.b))


@check("scan", "identity", 0.0)
def _identity(rng, context):
    op = context.combine
    x = _random_pair(rng, (64, 4))
    e = ScanPair.identity(x.a.shape)
    errors = []
    for result in (op(x, e), op(e, x)):
        errors.append(float(np.max(np.abs(result.a - x.a))))
        errors.append(float(np.max(np.abs(result.b - x.b))))
    return max(errors)


@check("scan", "combine_fold", 1e-12)
def _combine_fold(rng, context):
    leaves = _random_leaves(rng, 256, 4)
    accumulated = leaves[0]
    folded = [accumulated.b]
    for k in range(1, len(leaves)):
        accumulated = context.combine(accumulated, leaves[k])
        folded.append(accumulated.b)
    return relative_error(np.stack(folded), scan_sequential(leaves).b)


@check("scan", "sequential_matches_recurrence", 1e-11)
def _sequential_matches_recurrence(rng, context):
    n, m = 1024, 4
    A = _random_A(rng, m)
    delta, b, c, u = _random_arrays(rng, n, m)
    _, states = run_sequential(A, steps_from_arrays(delta, b, c, u), return_states=True)
    return relative_error(scan_sequential(leaf_pairs(A.entries, delta, b, u)).b, states)


@check("scan", "parallel_matches_sequential", 1e-9)
def _parallel_matches_sequential(rng, context):
    leaves = _random_leaves(rng, 4096, 16)
    reference = scan_sequential(leaves)
    worst = 0.0
    for workers in (1, 2, 4, 8):
        result = scan_parallel(leaves, workers, executor=context.executor if workers <= context.workers else None)
        worst = max(worst, relative_error(result.a, reference.a), relative_error(result.b, reference.b))
    return worst


@check("scan", "parallel_single_worker_bitwise", 0.0)
def _parallel_single_worker(rng, context):
    leaves = _random_leaves(rng, 2048, 8)
    sequential = scan_sequential(leaves)
    parallel = scan_parallel(leaves, 1)
    same = np.array_equal(sequential.a, parallel.a) and np.array_equal(sequential.b, parallel.b)
    return 0.0 if same else 1.0


@check("scan", "work_bound", 0.0)
def _work_bound(rng, context):
    leaves = _random_leaves(rng, 1000, 2)
    sequential = ScanStats()
    scan_sequential(leaves, stats=sequential)
    excess = 0
    for workers in (2, 3, 4, 8):
        parallel = ScanStats()
        scan_parallel(leaves, workers, stats=parallel)
        excess = max(excess, parallel.combines - 2 * sequential.combines)
    return float(max(0, excess))


# ============================================================
# grad
# ============================================================

def _scan_loss(a, b, weights):
    states = scan_sequential(ScanPair(a, b)).b
    return float(np.sum(weights.real * states.real + weights.imag * states.imag))


@check("grad", "adjoint_leaves", 1e-5)
def _adjoint_leaves(rng, context):
    n, m = 16, 2
    worst = 0.0
    for _ in range(20):
        pairs = _random_leaves(rng, n, m)
        weights = rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m))
        states = scan_sequential(pairs).b
        adjoint = adjoint_scan(pairs, weights, states, workers=context.workers, executor=context.executor)

        flat = np.concatenate([pairs.a.real.ravel(), pairs.a.imag.ravel(), pairs.b.real.ravel(), pairs.b.imag.ravel()])
        size = n * m

        def loss(x):
            a = (x[:size] + 1j * x[size:2 * size]).reshape(n, m)
            b = (x[2 * size:3 * size] + 1j * x[3 * size:]).reshape(n, m)
            return _scan_loss(a, b, weights)

        numeric = central_difference(loss, flat)
        analytic = np.concatenate([adjoint.a.real.ravel(), adjoint.a.imag.ravel(),
                                   adjoint.b.real.ravel(), adjoint.b.imag.ravel()])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@check("grad", "adjoint_checkpointed", 1e-12)
def _adjoint_checkpointed(rng, context):
    pairs = _random_leaves(rng, 300, 3)
    grads = rng.normal(size=pairs.a.shape) + 1j * rng.normal(size=pairs.a.shape)
    stored = adjoint_scan(pairs, grads, scan_sequential(pairs).b)
    worst = 0.0
    for every in (None, 1, 7, 300):
        recomputed = adjoint_scan(pairs, grads, checkpoint_every=every)
        worst = max(worst, relative_error(recomputed.a, stored.a), relative_error(recomputed.b, stored.b))
    return worst


@check("grad", "adjoint_zero", 0.0)
def _adjoint_zero(rng, context):
    pairs = _random_leaves(rng, 64, 4)
    adjoint = adjoint_scan(pairs, np.zeros(pairs.a.shape, dtype=complex), scan_sequential(pairs).b)
    return float(max(np.max(np.abs(adjoint.a)), np.max(np.abs(adjoint.b))))


@check("grad", "adjoint_delta_closed_form", 1e-12)
def _adjoint_delta(rng, context):
    m = 2
    A = _random_A(rng, m)
    b = rng.normal(size=m) + 1j * rng.normal(size=m)
    c = rng.normal(size=m) + 1j * rng.normal(size=m)
    u0, u1 = rng.normal(size=2)
    gap = float(rng.uniform(0.1, 1.0))

    pairs = leaf_pairs(A.entries, np.array([0.0, gap]), np.stack([b, b]), np.array([u0, u1]))
    states = scan_sequential(pairs).b
    # y_1 = Re(c . h_1)
    grads = np.stack([np.zeros(m, dtype=complex), np.conj(c)])
    adjoint = adjoint_scan(pairs, grads, states)
    from_adjoint = float(np.sum((np.conj(A.entries * pairs.a[1]) * adjoint.a[1]).real))

    closed_form = float(np.sum(c * A.entries * np.exp(A.entries * gap) * b * u0).real)
    return abs(from_adjoint - closed_form) / abs(closed_form)


def _small_layer(rng, row, n=3, m=2):
    params = StreamParams.init(n, m, row, rng, median_gap=1.0, dt_range=(0.1, 1.0))
    params.b_in[:] = rng.normal(scale=0.1, size=params.d)
    params.b_out[:] = rng.normal(scale=0.1, size=params.n)
    params.norm_weight[:] = 1.0 + rng.normal(scale=0.1, size=params.n)
    params.gamma_bias[:] = rng.normal(scale=0.1, size=params.d)
    return params


@check("grad", "layer_parameters", 1e-5)
def _layer_parameters(rng, context):
    worst = 0.0
    for row in VARIANT_ROWS:
        params = _small_layer(rng, row)
        x = rng.normal(size=(2, 6, params.n))
        gaps = TokenBatch(_sorted_times(rng, 2, 6, duplicate_every=3), x).gaps()
        weights = rng.normal(size=x.shape)

        def loss(_):
            out, _ = block_forward(params, x, gaps)
            return float(np.sum(weights * out))

        _, cache = block_forward(params, x, gaps)
        grads, grad_x = block_backward(params, cache, weights, workers=context.workers, executor=context.executor)
        for name, array in params.tensors().items():
            worst = max(worst, relative_error(grads[name], central_difference(loss, array)))
        worst = max(worst, relative_error(grad_x, central_difference(loss, x)))
    return worst


def _tiny_event_config(**overrides):
    settings = dict(n=4, m=2, layers=2, subsample_schedule=[(1, 2, 2)], variant="stream-DG", classes=3,
                    input="events", sensor_width=2, sensor_height=2, median_gap=1.0)
    settings.update(overrides)
    return ModelConfig(**settings)


@check("grad", "stack_end_to_end", 1e-4)
def _stack_end_to_end(rng, context):
    model = StreamModel.init(_tiny_event_config(), rng)
    model.head_norm[:] = 1.0 + rng.normal(scale=0.1, size=model.head_norm.shape)
    ids = rng.integers(0, model.embedding.shape[0], size=(2, 8))
    times = _sorted_times(rng, 2, 8, duplicate_every=4)
    targets = np.eye(3)[[0, 2]]

    def loss(_):
        logits, _ = model.forward(TokenBatch(times, model.embed(ids)))
        return cross_entropy(logits, targets)[0]

    logits, cache = model.forward(TokenBatch(times, model.embed(ids)))
    _, grad_logits = cross_entropy(logits, targets)
    grads, grad_U = model.backward(cache, grad_logits, workers=context.workers, executor=context.executor)
    grads["embedding"] = model.embed_backward(ids, grad_U)
    return max(relative_error(grads[name], central_difference(loss, array))
               for name, array in model.tensors().items())


# ============================================================
# layer
# ============================================================

@check("layer", "channel_oracle", 1e-10)
def _channel_oracle(rng, context):
    params = StreamParams.init(4, 4, "stream-DG", rng)
    x = rng.normal(size=(1, 64, 4))
    gaps = TokenBatch(_sorted_times(rng, 1, 64), x).gaps()
    out, cache = block_forward(params, x, gaps, workers=context.workers, executor=context.executor)
    ys = np.stack([apply_kernel_oracle(params.channel_matrix(j), cache.disc.siso_steps(j))
                   for j in range(params.d)], axis=1)
    return relative_error(out[0], x[0] + ys @ params.W_out + params.b_out)


@check("layer", "zero_input_residual", 0.0)
def _zero_input(rng, context):
    params = StreamParams.init(4, 4, "stream-DG", rng)
    seq = TokenSequence(np.sort(rng.uniform(0, 1, size=16)), np.zeros((16, 4)))
    return float(np.max(np.abs(mimo_forward(params, seq) - params.b_out)))


@check("layer", "variant_rows", 0.0)
def _variant_rows(rng, context):
    expected = {
        "mamba": (False, True, True),
        "stream-00": (True, False, False),
        "stream-0Γ": (True, False, True),
        "stream-Δ0": (True, True, False),
        "stream-ΔΓ": (True, True, True),
    }
    wrong = 0
    for row, flags in expected.items():
        variant = make_variant(row)
        wrong += (variant.use_timestamps, variant.delta_softplus_linear, variant.gamma_softplus_linear) != flags
    return float(wrong)


@check("layer", "timestamp_sensitivity", 0.0)
def _timestamp_sensitivity(rng, context):
    failures = 0
    for row in VARIANT_ROWS:
        params = StreamParams.init(4, 4, row, rng)
        t = np.sort(rng.uniform(0.0, 4.0, size=32))
        U = rng.normal(size=(32, 4))
        base = mimo_forward(params, TokenSequence(t, U))
        stretched = mimo_forward(params, TokenSequence(2.0 * t, U))
        if row == "mamba":
            failures += not np.array_equal(base, stretched)
        else:
            failures += not float(np.max(np.abs(base - stretched))) > 1e-6
    return float(failures)


@check("layer", "translation_invariance", 1e-12)
def _translation_invariance(rng, context):
    worst = 0.0
    for row in VARIANT_ROWS:
        params = StreamParams.init(4, 4, row, rng)
        t = np.sort(rng.uniform(0.0, 1.0, size=32))
        U = rng.normal(size=(32, 4))
        worst = max(worst, relative_error(mimo_forward(params, TokenSequence(t + 10.0, U)),
                                          mimo_forward(params, TokenSequence(t, U))))
    return worst


@check("layer", "overlap_robustness", 0.0)
def _overlap_robustness(rng, context):
    failures = 0
    for row in ("stream-00", "stream-0G", "stream-D0", "stream-DG"):
        params = StreamParams.init(4, 4, row, rng)
        t = np.sort(rng.uniform(0.0, 4.0, size=16))
        U = rng.normal(size=(16, 4))
        doubled = TokenSequence(np.repeat(t, 2), np.repeat(U, 2, axis=0))
        out = mimo_forward(params, doubled)
        gamma = discretize_stream(params, doubled).gamma
        single = mimo_forward(params, TokenSequence(t, U))
        failures += not np.all(np.isfinite(out))
        failures += not np.all(gamma > 0.0)
        failures += not float(np.max(np.abs(out[-1] - single[-1]))) > 1e-9
    return float(failures)


@check("layer", "subsample_lengths", 0.0)
def _subsample_lengths(rng, context):
    config = ModelConfig(n=4, m=2, layers=2, subsample_schedule=[(1, 4, 1)], input="features", classes=2)
    model = StreamModel.init(config, rng)
    batch = TokenBatch(_sorted_times(rng, 1, 16), rng.normal(size=(1, 16, 4)))
    _, cache = model.forward(batch)
    lengths = [payload.disc.x.shape[1] for kind, _, payload in cache.trace if kind == "block"]
    return 0.0 if lengths == [16, 4] else 1.0


@check("layer", "single_layer_pooled", 1e-12)
def _single_layer_pooled(rng, context):
    config = ModelConfig(n=4, m=2, layers=1, input="features", classes=4, final_norm=False)
    model = StreamModel.init(config, rng)
    model.head_W = np.eye(4)
    seq = TokenSequence(np.sort(rng.uniform(0, 1, size=20)), rng.normal(size=(20, 4)))
    logits, _ = model.forward(seq.as_batch())
    return relative_error(logits[0], mimo_forward(model.blocks[0], seq).mean(axis=0))


def _event_stream(rng, length, width=2, height=2):
    gaps = rng.integers(0, 2000, size=length - 1)
    t = np.concatenate([[int(rng.integers(0, 10 ** 6))], gaps]).cumsum()
    return EventStream(make_events(t, rng.integers(0, width, length), rng.integers(0, height, length),
                                   rng.integers(0, 2, length)), width, height)


def _batch_logits(model, stream):
    ids = event_token_ids(stream.events, stream.width, stream.height)
    batch = TokenBatch(event_times(stream.events)[None], model.embed(ids)[None])
    return model.forward(batch)[0][0]


@check("layer", "streaming_replay", 1e-9)
def _streaming_replay(rng, context):
    model = StreamModel.init(_tiny_event_config(subsample_schedule=[(1, 2, 1), (2, 3, 1)], median_gap=1e-3), rng)
    stream = _event_stream(rng, 50)
    classifier = StreamingClassifier(model, stream.width, stream.height)
    for event in stream:
        classifier.push(event)
    return relative_error(classifier.logits(), _batch_logits(model, stream))


@check("layer", "checkpoint_roundtrip", 0.0)
def _checkpoint_roundtrip(rng, context):
    model = StreamModel.init(_tiny_event_config(), rng)
    stream = _event_stream(rng, 24)
    with tempfile.TemporaryDirectory() as directory:
        path = os.path.join(directory, "model.ckpt")
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
    same = np.array_equal(_batch_logits(model, stream), _batch_logits(loaded, stream))
    return 0.0 if same else 1.0


# ============================================================
# geometry
# ============================================================

def _random_cloud(rng, n, ties=False):
    points = rng.uniform(-1.0, 1.0, size=(n, 3))
    return np.round(points, 1) if ties else points


def _squared(p, q):
    return sum((p[axis] - q[axis]) * (p[axis] - q[axis]) for axis in range(3))


def _fps_reference(points, k, seed):
    chosen = [seed]
    while len(chosen) < k:
        best, best_distance = None, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            distance = min(_squared(points[i], points[j]) for j in chosen)
            if distance > best_distance:
                best, best_distance = i, distance
        chosen.append(best)
    return chosen


@check("geometry", "serialize_permutation", 0.0)
def _serialize_permutation(rng, context):
    encoder = PointEncoder.init(4, rng)
    emb = AxisEmbedding.init(4, rng)
    failures = 0
    for trial in range(100):
        points = _random_cloud(rng, int(rng.integers(1, 33)), ties=trial % 2 == 0)
        reference = serialize_points(points, encoder, emb)
        shuffled = serialize_points(points[rng.permutation(len(points))], encoder, emb)
        failures += not (np.array_equal(reference.t, shuffled.t) and np.array_equal(reference.U, shuffled.U))
    return float(failures)


@check("geometry", "serialize_segments", 0.0)
def _serialize_segments(rng, context):
    encoder = PointEncoder.init(4, rng)
    emb = AxisEmbedding.init(4, rng)
    points = _random_cloud(rng, 40)
    seq = serialize_points(points, encoder, emb)
    failures = len(seq) != 3 * len(points)
    for axis in range(3):
        segment = seq.t[seq.segment == axis]
        failures += len(segment) != len(points)
        failures += bool(np.any(np.diff(segment) < 0.0))
    failures += bool(np.any(seq.gaps()[[0, len(points), 2 * len(points)]] != 0.0))
    return float(failures)


@check("geometry", "fps_oracle", 0.0)
def _fps_oracle(rng, context):
    failures = 0
    for trial in range(200):
        points = _random_cloud(rng, int(rng.integers(1, 129)), ties=trial % 2 == 0)
        k = int(rng.integers(1, min(len(points), 16) + 1))
        seed = int(rng.integers(0, len(points)))
        failures += list(fps(points, k, seed_index=seed)) != _fps_reference(points.tolist(), k, seed)
    return float(failures)


@check("geometry", "fps_permutation", 0.0)
def _fps_permutation(rng, context):
    failures = 0
    for _ in range(50):
        points = _random_cloud(rng, int(rng.integers(2, 65)))
        k = int(rng.integers(1, len(points) + 1))
        permutation = rng.permutation(len(points))
        selected = {tuple(p) for p in points[fps(points, k)]}
        shuffled = points[permutation]
        failures += selected != {tuple(p) for p in shuffled[fps(shuffled, k)]}
    return float(failures)


@check("geometry", "knn_oracle", 0.0)
def _knn_oracle(rng, context):
    failures = 0
    for trial in range(200):
        points = _random_cloud(rng, int(rng.integers(1, 129)), ties=trial % 2 == 0)
        k = int(rng.integers(1, len(points) + 1))
        centers = rng.integers(0, len(points), size=4)
        listed = points.tolist()
        groups = knn_group(points, centers, k)
        for row, center in enumerate(centers):
            reference = sorted(range(len(points)), key=lambda i: (_squared(listed[i], listed[center]), i))[:k]
            failures += list(groups[row]) != reference
    return float(failures)


@check("geometry", "token_ids_injective", 0.0)
def _token_ids_injective(rng, context):
    width, height = 5, 3
    x, y, p = np.meshgrid(np.arange(width), np.arange(height), np.arange(2), indexing="ij")
    events = make_events(np.zeros(x.size, dtype=np.int64), x.ravel(), y.ravel(), p.ravel())
    ids = event_token_ids(events, width, height)
    return float(len(ids) - len(np.unique(ids)) + int(ids.max() >= 2 * width * height))


@check("geometry", "cutmix_convex", 0.0)
def _cutmix_convex(rng, context):
    failures = 0
    for _ in range(100):
        a = _event_stream(rng, int(rng.integers(1, 40)))
        b = _event_stream(rng, int(rng.integers(1, 40)))
        label_a, label_b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        w = int(rng.integers(0, a.duration + 1))
        tau = int(a.events["t"][0]) + int(rng.integers(0, a.duration - w + 1))
        sigma = int(b.events["t"][0])
        mixed, label = event_cutmix(a, label_a, b, label_b, rng, window=(tau, w), source_start=sigma)

        ta = a.events["t"].astype(np.int64)
        tb = b.events["t"].astype(np.int64)
        kept_a = int(np.sum((ta < tau) | (ta >= tau + w)))
        from_b = int(np.sum((tb >= sigma) & (tb < sigma + w)))
        expected = from_b / (kept_a + from_b) if kept_a + from_b else 0.0
        lam = label[1]
        failures += len(mixed) != kept_a + from_b
        failures += not 0.0 <= lam <= 1.0
        failures += lam != expected
        failures += not math.isclose(label.sum(), 1.0)
    return float(failures)


# ============================================================
# train
# ============================================================

@check("train", "cross_entropy_gradient", 1e-6)
def _cross_entropy_gradient(rng, context):
    logits = rng.normal(size=(3, 4))
    target = rng.dirichlet(np.ones(4), size=3)
    _, grad = cross_entropy(logits, target)
    return relative_error(grad, central_difference(lambda x: cross_entropy(x, target)[0], logits))


@check("train", "cross_entropy_uniform", 1e-15)
def _cross_entropy_uniform(rng, context):
    loss, _ = cross_entropy(np.full(7, float(rng.normal())), 3)
    return abs(loss - math.log(7)) / math.log(7)


def _adam_reference(x, curvature, config, steps):
    x = list(x)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    beta1, beta2 = config.betas
    trajectory = []
    for t in range(1, steps + 1):
        for i in range(len(x)):
            g = curvature[i] * x[i]
            m[i] = m[i] * beta1 + (1.0 - beta1) * g
            v[i] = v[i] * beta2 + (1.0 - beta2) * g * g
            x[i] = x[i] - config.lr * (m[i] / (1.0 - beta1 ** t)) / (math.sqrt(v[i] / (1.0 - beta2 ** t)) + config.eps)
        trajectory.append(list(x))
    return np.array(trajectory)


@check("train", "adam_reference", 1e-12)
def _adam(rng, context):
    config = TrainConfig(lr=0.05, grad_clip=0.0)
    curvature = rng.uniform(0.5, 3.0, size=5)
    x0 = rng.normal(size=5)
    params = {"x": x0.copy()}
    state = AdamState()
    trajectory = []
    for _ in range(10):
        adam_step(params, {"x": curvature * params["x"]}, state, config)
        trajectory.append(params["x"].copy())
    return relative_error(np.array(trajectory), _adam_reference(x0.tolist(), curvature.tolist(), config, 10))


@check("train", "gap_task_balance", 0.02)
def _gap_task_balance(rng, context):
    dataset = make_gap_task(rng, 200, length=64)
    counts = np.bincount(dataset.labels, minlength=2)
    gaps = [np.diff(s.events["t"].astype(np.int64)) for s in dataset.streams]
    mean_gap = [np.mean([g.mean() for g, label in zip(gaps, dataset.labels) if label == c]) for c in (0, 1)]
    variance = np.array([g.var() for g in gaps])
    threshold_hits = np.mean((variance > 0.1 * 1000.0 ** 2) == (dataset.labels == 1))
    imbalance = abs(int(counts[0]) - int(counts[1])) / len(dataset)
    return max(imbalance, abs(mean_gap[0] - mean_gap[1]) / 1000.0, 1.0 - threshold_hits)


# upper 1e-4 quantile of chi-square with 7 degrees of freedom (2x2 sensor, 8 token ids)
TOKEN_HISTOGRAM_CRITICAL = 29.877


@check("train", "token_histograms", TOKEN_HISTOGRAM_CRITICAL)
def _token_histograms(rng, context):
    statistic, dof = chi_square_homogeneity(token_histograms(make_gap_task(rng, 200, length=64)))
    return statistic if dof == 7 else float("inf")


@check("train", "determinism", 0.0)
def _determinism(rng, context):
    dataset = make_gap_task(rng, 24, length=16)
    train_set, val_set = split_dataset(dataset, 16)
    config = ModelConfig(n=4, m=2, layers=1, sensor_width=2, sensor_height=2)
    train_config = TrainConfig(epochs=2, batch=8, seed=int(rng.integers(0, 2 ** 31)))
    augment = EventAugmentConfig(cutmix_prob=0.5)
    runs = []
    with tempfile.TemporaryDirectory() as directory:
        for run in range(2):
            _, records = train_toy(config, train_config, train_set, val_set, os.path.join(directory, str(run)),
                                   augment=augment, workers=context.workers, executor=context.executor)
            runs.append([{k: v for k, v in record.items() if k != "wall_seconds"} for record in records])
    return 0.0 if runs[0] == runs[1] else 1.0


@check("train", "lr_zero", 0.0)
def _lr_zero(rng, context):
    # the mamba row ignores timestamps, so with frozen weights its predictions
    # are independent of the labels
    dataset = make_gap_task(rng, 96, length=16)
    train_set, val_set = split_dataset(dataset, 32)
    config = ModelConfig(n=4, m=2, layers=1, variant="mamba")
    train_config = TrainConfig(lr=0.0, epochs=3, batch=8, seed=int(rng.integers(0, 2 ** 31)))
    initial = StreamModel.init(config, make_rng(train_config.seed, "init"))
    baseline = evaluate(initial, val_set, train_config.batch)[1]
    with tempfile.TemporaryDirectory() as directory:
        model, records = train_toy(config, train_config, train_set, val_set, directory,
                                   workers=context.workers, executor=context.executor)
    start = initial.tensors()
    moved = max(float(np.max(np.abs(array - start[name]))) for name, array in model.tensors().items())
    accuracy = np.array([record["accuracy"] for record in records if record["split"] == "val"])
    chance = max(0.0, float(np.max(np.abs(accuracy - 0.5))) - 4.0 * math.sqrt(0.25 / len(val_set)))
    return max(moved, float(np.max(np.abs(accuracy - baseline))), chance)


@check("train", "loss_decrease", 0.01)
def _loss_decrease(rng, context):
    dataset = make_gap_task(rng, 64, length=32)
    config = ModelConfig(n=4, m=2, layers=1, variant="stream-DG")
    train_config = TrainConfig(lr=0.01, epochs=5, batch=8, seed=int(rng.integers(0, 2 ** 31)))
    with tempfile.TemporaryDirectory() as directory:
        _, records = train_toy(config, train_config, dataset, split_dataset(dataset, 64)[1], directory,
                               workers=context.workers, executor=context.executor)
    losses = np.array([record["loss"] for record in records if record["split"] == "train"])
    smoothed = np.convolve(losses, np.ones(3) / 3.0, mode="valid")
    rise = float(np.max(np.diff(smoothed), initial=0.0))
    return max(rise, 0.0) if losses[-1] < losses[0] else float("inf")
