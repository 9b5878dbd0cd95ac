import numpy as np
import pytest

from stream_ssm.modules.errors import ContractError, OrderError, PropagationError
from stream_ssm.modules.ssm_core import (
    DiagonalMatrixA,
    SisoState,
    SisoStep,
    apply_kernel_oracle,
    kernel_value,
    run_sequential,
    step,
    steps_from_arrays,
)


def random_system(rng, n=40, m=3, conjugate_pairs=False):
    A = DiagonalMatrixA(-rng.uniform(0.05, 1.0, m) + 1j * rng.uniform(-3, 3, m), conjugate_pairs=conjugate_pairs)
    delta = rng.exponential(0.5, n)
    b = rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m))
    c = rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m))
    u = rng.normal(size=n)
    return A, steps_from_arrays(delta, b, c, u)


def test_step_closed_form():
    A = DiagonalMatrixA([-1.0, -0.5])
    state = step(SisoState(np.array([1.0, 2.0])), A, SisoStep(0.5, [1.0, 1.0], [1.0, 1.0], 2.0))
    np.testing.assert_allclose(state.h, [np.exp(-0.5) + 2.0, 2.0 * np.exp(-0.25) + 2.0], rtol=1e-15)


def test_from_raw_gives_negative_real_part():
    A = DiagonalMatrixA.from_raw([-3.0, 0.0, 5.0], imag=[0.0, 1.0, 2.0])
    assert np.all(A.entries.real < 0.0)
    np.testing.assert_array_equal(A.entries.imag, [0.0, 1.0, 2.0])


def test_sequential_matches_kernel_oracle(rng):
    A, steps = random_system(rng)
    np.testing.assert_allclose(run_sequential(A, steps), apply_kernel_oracle(A, steps), rtol=1e-10, atol=1e-12)


def test_conjugate_pairs_double_the_readout(rng):
    A, steps = random_system(rng, n=10)
    paired = DiagonalMatrixA(A.entries, conjugate_pairs=True)
    np.testing.assert_allclose(run_sequential(paired, steps), 2.0 * run_sequential(A, steps), rtol=1e-15)


def test_zero_gaps_give_cumulative_sum(rng):
    u = rng.normal(size=12)
    steps = steps_from_arrays(np.zeros(12), np.ones((12, 1)), np.ones((12, 1)), u)
    np.testing.assert_allclose(run_sequential(DiagonalMatrixA([-0.3]), steps), np.cumsum(u), rtol=1e-12)


def test_output_does_not_depend_on_future_inputs(rng):
    A, steps = random_system(rng, n=20)
    changed = list(steps)
    changed[15] = SisoStep(steps[15].delta, steps[15].b, steps[15].c, steps[15].u + 10.0)
    np.testing.assert_array_equal(run_sequential(A, steps)[:15], run_sequential(A, changed)[:15])


def test_kernel_is_causal(rng):
    A, steps = random_system(rng, n=5)
    with pytest.raises(OrderError):
        kernel_value(A, steps, 1, 3)


def test_return_states_shape(rng):
    A, steps = random_system(rng, n=7, m=2)
    y, states = run_sequential(A, steps, return_states=True)
    assert y.shape == (7,)
    assert states.shape == (7, 2)


def test_empty_sequence_is_rejected():
    with pytest.raises(ContractError):
        run_sequential(DiagonalMatrixA([-1.0]), [])


def test_negative_step_is_rejected():
    with pytest.raises(OrderError):
        SisoStep(-1e-3, [1.0], [1.0], 1.0)


def test_unstable_matrix_is_rejected():
    with pytest.raises(ContractError):
        DiagonalMatrixA([0.1 + 1j])


def test_dimension_mismatch_is_rejected():
    with pytest.raises(ContractError):
        run_sequential(DiagonalMatrixA([-1.0, -2.0]), [SisoStep(0.1, [1.0], [1.0], 1.0)])


def test_non_finite_input_reports_index(rng):
    A, steps = random_system(rng, n=6)
    steps[3] = SisoStep(steps[3].delta, steps[3].b, steps[3].c, np.nan)
    with pytest.raises(PropagationError) as info:
        run_sequential(A, steps)
    assert info.value.index == 3
