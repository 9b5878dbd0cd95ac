from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from stream_ssm.modules.errors import ContractError, PropagationError
from stream_ssm.modules.scan import (
    ScanPair,
    ScanStats,
    adjoint_scan,
    combine,
    leaf_pairs,
    scan_parallel,
    scan_sequential,
)
from stream_ssm.modules.ssm_core import DiagonalMatrixA, run_sequential, steps_from_arrays


def random_leaves(rng, n=500, m=3):
    entries = -rng.uniform(0.05, 1.0, m) + 1j * rng.uniform(-3, 3, m)
    delta = rng.exponential(0.5, n)
    b = rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m))
    u = rng.normal(size=n)
    return entries, delta, b, u


def random_pair(rng, shape):
    a = rng.uniform(0.2, 1.0, shape) * np.exp(1j * rng.uniform(-np.pi, np.pi, shape))
    return ScanPair(a, rng.normal(size=shape) + 1j * rng.normal(size=shape))


def test_combine_is_associative(rng):
    p, q, r = (random_pair(rng, (100, 2)) for _ in range(3))
    left = combine(combine(p, q), r)
    right = combine(p, combine(q, r))
    np.testing.assert_allclose(left.a, right.a, rtol=1e-13)
    np.testing.assert_allclose(left.b, right.b, rtol=1e-12, atol=1e-14)


def test_identity_is_neutral(rng):
    x = random_pair(rng, (16, 3))
    e = ScanPair.identity(x.a.shape)
    for result in (combine(x, e), combine(e, x)):
        np.testing.assert_array_equal(result.a, x.a)
        np.testing.assert_array_equal(result.b, x.b)


def test_combine_rejects_shape_mismatch(rng):
    with pytest.raises(ContractError):
        combine(random_pair(rng, (2,)), random_pair(rng, (3,)))


def test_sequential_scan_states_match_recurrence(rng):
    entries, delta, b, u = random_leaves(rng, n=200)
    A = DiagonalMatrixA(entries)
    _, states = run_sequential(A, steps_from_arrays(delta, b, b, u), return_states=True)
    np.testing.assert_allclose(scan_sequential(leaf_pairs(entries, delta, b, u)).b, states, rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("workers", [2, 3, 4, 7])
def test_parallel_matches_sequential(rng, workers):
    leaves = leaf_pairs(*random_leaves(rng, n=1000))
    reference = scan_sequential(leaves)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        result = scan_parallel(leaves, workers, executor=executor)
    np.testing.assert_allclose(result.a, reference.a, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(result.b, reference.b, rtol=1e-9, atol=1e-12)


def test_single_worker_is_bitwise_sequential(rng):
    leaves = leaf_pairs(*random_leaves(rng, n=300))
    sequential = scan_sequential(leaves)
    parallel = scan_parallel(leaves, 1)
    np.testing.assert_array_equal(parallel.a, sequential.a)
    np.testing.assert_array_equal(parallel.b, sequential.b)


def test_more_workers_than_elements(rng):
    leaves = leaf_pairs(*random_leaves(rng, n=3))
    np.testing.assert_allclose(scan_parallel(leaves, 8).b, scan_sequential(leaves).b, rtol=1e-12)


def test_parallel_work_and_depth(rng):
    leaves = leaf_pairs(*random_leaves(rng, n=1000, m=2))
    sequential, parallel = ScanStats(), ScanStats()
    scan_sequential(leaves, stats=sequential)
    scan_parallel(leaves, 4, stats=parallel)
    assert sequential.combines == 999
    assert parallel.combines <= 2 * sequential.combines
    assert parallel.depth < sequential.depth


def test_single_precision_leaves(rng):
    entries, delta, b, u = random_leaves(rng, n=64)
    single = scan_sequential(leaf_pairs(entries, delta, b, u, precision="single"))
    double = scan_sequential(leaf_pairs(entries, delta, b, u))
    assert single.b.dtype == np.complex64
    np.testing.assert_allclose(single.b, double.b, rtol=1e-4, atol=1e-4)


def test_scan_rejects_bad_arguments(rng):
    leaves = leaf_pairs(*random_leaves(rng, n=10))
    with pytest.raises(ContractError):
        scan_parallel(leaves, 0)
    with pytest.raises(ContractError):
        scan_sequential(ScanPair(np.zeros((0, 2), complex), np.zeros((0, 2), complex)))


def test_non_finite_leaf_reports_index(rng):
    entries, delta, b, u = random_leaves(rng, n=20)
    b[5, 0] = np.nan
    with pytest.raises(PropagationError) as info:
        scan_parallel(leaf_pairs(entries, delta, b, u), 2)
    assert info.value.index == 5


# ============================================================
# Adjoint
# ============================================================

def scan_loss(a, b, weights):
    states = scan_sequential(ScanPair(a, b)).b
    return float(np.sum(weights.real * states.real + weights.imag * states.imag))


def numeric_cotangent(func, z, step=1e-6):
    grad = np.zeros_like(z)
    for index in np.ndindex(z.shape):
        for unit in (1.0, 1j):
            saved = z[index]
            z[index] = saved + step * unit
            plus = func()
            z[index] = saved - step * unit
            minus = func()
            z[index] = saved
            grad[index] += unit * (plus - minus) / (2 * step)
    return grad


def test_adjoint_matches_finite_differences(rng):
    pairs = random_pair(rng, (8, 2))
    weights = rng.normal(size=(8, 2)) + 1j * rng.normal(size=(8, 2))
    states = scan_sequential(pairs).b

    grads = adjoint_scan(pairs, weights, states=states)
    a, b = pairs.a.copy(), pairs.b.copy()
    np.testing.assert_allclose(grads.b, numeric_cotangent(lambda: scan_loss(a, b, weights), b), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(grads.a, numeric_cotangent(lambda: scan_loss(a, b, weights), a), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("every", [1, 3, 5, None])
def test_checkpointed_adjoint_matches_stored_states(rng, every):
    pairs = random_pair(rng, (17, 3))
    weights = rng.normal(size=(17, 3)) + 1j * rng.normal(size=(17, 3))
    stored = adjoint_scan(pairs, weights, states=scan_sequential(pairs).b)
    recomputed = adjoint_scan(pairs, weights, checkpoint_every=every)
    np.testing.assert_allclose(recomputed.a, stored.a, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(recomputed.b, stored.b, rtol=1e-12, atol=1e-13)


def test_adjoint_of_zero_cotangent_is_zero(rng):
    pairs = random_pair(rng, (9, 2))
    grads = adjoint_scan(pairs, np.zeros((9, 2), complex), workers=2)
    assert not np.any(grads.a)
    assert not np.any(grads.b)


def test_adjoint_needs_states_or_recompute(rng):
    pairs = random_pair(rng, (4, 1))
    with pytest.raises(ContractError):
        adjoint_scan(pairs, np.ones((4, 1), complex), recompute=False)
    with pytest.raises(ContractError):
        adjoint_scan(pairs, np.ones((5, 1), complex))


@pytest.mark.parametrize("every", [1, 4, None])
def test_checkpointed_adjoint_reports_non_finite_state(rng, every):
    pairs = random_pair(rng, (12, 2))
    pairs.b[7, 1] = np.inf
    with pytest.raises(PropagationError) as info:
        adjoint_scan(pairs, np.ones((12, 2), complex), checkpoint_every=every)
    assert info.value.index == 7
