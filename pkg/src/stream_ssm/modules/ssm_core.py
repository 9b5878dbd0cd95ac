#!/usr/bin/python3

"""
Single-input single-output linear time-varying SSM on Dirac-pulse inputs.

The state jumps by ``b_k u_k`` at every pulse and decays with the diagonal
transition ``exp(A delta_k)`` in between:

    h_k = exp(A delta_k) * h_{k-1} + b_k u_k
    y_k = s * Re(c_k . h_k)

``s`` is 2 when the stored entries of ``A`` are conjugate-pair
representatives and 1 otherwise.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from stream_ssm.modules.errors import ContractError, OrderError, PropagationError
from stream_ssm.modules.numerics import softplus


def _frozen_array(values, dtype):
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class DiagonalMatrixA:
    entries: np.ndarray
    conjugate_pairs: bool = False

    def __post_init__(self):
        entries = _frozen_array(np.atleast_1d(self.entries), np.complex128)
        if entries.ndim != 1 or entries.size < 1:
            raise ContractError("A must be a non-empty vector of diagonal entries")
        if not np.all(np.isfinite(entries)):
            raise PropagationError("A has non-finite entries")
        if np.any(entries.real > 0.0):
            raise ContractError("A must have non-positive real parts")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_raw(cls, raw_real, imag=None, conjugate_pairs=False):
        """Stable parameterization Re(A) = -softplus(raw)."""
        raw_real = np.asarray(raw_real, dtype=np.float64)
        imag = np.zeros_like(raw_real) if imag is None else np.asarray(imag, dtype=np.float64)
        return cls(-softplus(raw_real) + 1j * imag, conjugate_pairs=conjugate_pairs)

    @property
    def m(self):
        return self.entries.size

    @property
    def readout_scale(self):
        return 2.0 if self.conjugate_pairs else 1.0


@dataclass(frozen=True)
class SisoStep:
    delta: float
    b: np.ndarray
    c: np.ndarray
    u: float

    def __post_init__(self):
        delta = float(self.delta)
        if not delta >= 0.0:
            raise OrderError(f"step size must be non-negative, got {delta}")
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "u", float(self.u))
        object.__setattr__(self, "b", _frozen_array(np.atleast_1d(self.b), np.complex128))
        object.__setattr__(self, "c", _frozen_array(np.atleast_1d(self.c), np.complex128))
        if self.b.shape != self.c.shape:
            raise ContractError(f"b and c differ in size: {self.b.size} vs {self.c.size}")


@dataclass(frozen=True)
class SisoState:
    h: np.ndarray

    def __post_init__(self):
        h = _frozen_array(np.atleast_1d(self.h), np.complex128)
        if not np.all(np.isfinite(h)):
            raise PropagationError("state has non-finite entries")
        object.__setattr__(self, "h", h)

    @classmethod
    def zeros(cls, m):
        return cls(np.zeros(m, dtype=np.complex128))


def steps_from_arrays(delta, b, c, u):
    """Builds ``SisoStep`` objects from stacked arrays (N,), (N, m), (N, m), (N,)."""
    delta = np.asarray(delta, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return [SisoStep(delta[k], b[k], c[k], u[k]) for k in range(delta.size)]


# ============================================================
# Recurrence
# ============================================================

def _check_dims(A, s, index=None):
    if s.b.size != A.m:
        where = "" if index is None else f" at step {index}"
        raise ContractError(f"state dimension mismatch{where}: A has {A.m}, step has {s.b.size}")


def step(state: SisoState, A: DiagonalMatrixA, s: SisoStep, index: Optional[int] = None) -> SisoState:
    _check_dims(A, s, index)
    if state.h.size != A.m:
        raise ContractError(f"state dimension mismatch: A has {A.m}, state has {state.h.size}")
    if not (np.isfinite(s.u) and np.isfinite(s.delta)
            and np.all(np.isfinite(s.b)) and np.all(np.isfinite(s.c))):
        raise PropagationError("non-finite step input", index=index)

    h = np.exp(A.entries * s.delta) * state.h + s.b * s.u

    if not np.all(np.isfinite(h)):
        raise PropagationError("state became non-finite", index=index)
    return SisoState(h)


def run_sequential(A: DiagonalMatrixA, steps: Sequence[SisoStep],
                   h0: Optional[SisoState] = None, return_states=False):
    """
    O(N) evaluation of the recurrence.

    Returns the outputs ``y`` (N,), and the states (N, m) as well when
    ``return_states`` is set.
    """
    if len(steps) == 0:
        raise ContractError("at least one step is required")

    state = SisoState.zeros(A.m) if h0 is None else h0
    y = np.empty(len(steps), dtype=np.float64)
    states = np.empty((len(steps), A.m), dtype=np.complex128)

    for k, s in enumerate(steps):
        state = step(state, A, s, index=k)
        states[k] = state.h
        y[k] = A.readout_scale * np.sum(s.c * state.h).real

    if return_states:
        return y, states
    return y


# ============================================================
# Kernel oracle
# ============================================================

def kernel_value(A: DiagonalMatrixA, steps: Sequence[SisoStep], k: int, i: int) -> float:
    """
    Phi(t_k, t_i) = C_k ( prod_{j=i+1}^{k} exp(A delta_j) ) B_i

    The empty product (i == k) is the identity.
    """
    if i > k:
        raise OrderError(f"kernel is causal: i={i} > k={k}")
    if i < 0 or k >= len(steps):
        raise ContractError(f"indices out of range: k={k}, i={i}, N={len(steps)}")
    _check_dims(A, steps[k], k)
    _check_dims(A, steps[i], i)

    gap = sum(steps[j].delta for j in range(i + 1, k + 1))
    transfer = np.exp(A.entries * gap)
    return float(A.readout_scale * np.sum(steps[k].c * transfer * steps[i].b).real)


def kernel_matrix(A: DiagonalMatrixA, steps: Sequence[SisoStep]) -> np.ndarray:
    """Lower-triangular matrix of all causal interactions Phi(t_k, t_i)."""
    n = len(steps)
    if n == 0:
        raise ContractError("at least one step is required")
    for k, s in enumerate(steps):
        _check_dims(A, s, k)

    times = np.cumsum([s.delta for s in steps])
    b = np.stack([s.b for s in steps])
    phi = np.zeros((n, n), dtype=np.float64)

    for k in range(n):
        gaps = times[k] - times[:k + 1]
        transfer = np.exp(A.entries[None, :] * gaps[:, None])
        phi[k, :k + 1] = A.readout_scale * np.sum(steps[k].c[None, :] * transfer * b[:k + 1], axis=1).real
    return phi


def apply_kernel_oracle(A: DiagonalMatrixA, steps: Sequence[SisoStep]) -> np.ndarray:
    """O(N^2) evaluation y_k = sum_{i<=k} Phi(t_k, t_i) u_i."""
    u = np.array([s.u for s in steps], dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise PropagationError("non-finite input", index=int(np.argmin(np.isfinite(u))))
    return kernel_matrix(A, steps) @ u
