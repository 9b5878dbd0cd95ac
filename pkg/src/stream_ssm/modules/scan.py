#!/usr/bin/python3

"""
Associative-pair form of the diagonal recurrence.

A pair c = [a, b] stands for the affine map h -> a * h + b. Composition

    [a_i, b_i] . [a_j, b_j] = [a_i a_j, a_j b_i + b_j]

is associative with identity [1, 0], so every prefix of a sequence of leaves
[exp(A delta_k), B_k u_k] can be computed by a scan; the b-component of
prefix k is the state h_k.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from stream_ssm.modules.errors import ContractError, PropagationError

logger = logging.getLogger(__name__)

PRECISIONS = {"double": np.complex128, "single": np.complex64}


@dataclass
class ScanPair:
    """
    One pair, or a sequence of pairs when the arrays have a leading
    sequence axis of length N.
    """
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a)
        self.b = np.asarray(self.b)
        if self.a.shape != self.b.shape:
            raise ContractError(f"pair components differ in shape: {self.a.shape} vs {self.b.shape}")

    def __len__(self):
        return self.a.shape[0]

    def __getitem__(self, index):
        return ScanPair(self.a[index], self.b[index])

    def copy(self):
        return ScanPair(self.a.copy(), self.b.copy())

    @classmethod
    def identity(cls, shape, dtype=np.complex128):
        return cls(np.ones(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


@dataclass
class ScanStats:
    """Instrumentation: pair combinations (per element vector) and critical-path depth."""
    combines: int = 0
    depth: int = 0


def leaf_pairs(A_entries, delta, b, u, precision="double"):
    """
    Leaves [exp(A delta_i), B_i u_i].

    ``A_entries`` (..., m) broadcasts against ``delta[..., None]``; ``b`` is
    (N, ..., m) and ``u`` (N, ...).
    """
    dtype = PRECISIONS[precision]
    delta = np.asarray(delta, dtype=np.float64)
    a = np.exp(np.asarray(A_entries) * delta[..., None])
    leaf_b = np.asarray(b) * np.asarray(u, dtype=np.float64)[..., None]
    a, leaf_b = np.broadcast_arrays(a, leaf_b)
    return ScanPair(a.astype(dtype), leaf_b.astype(dtype))


def combine(left: ScanPair, right: ScanPair) -> ScanPair:
    if left.a.shape != right.a.shape:
        raise ContractError(f"cannot combine pairs of shape {left.a.shape} and {right.a.shape}")
    return ScanPair(left.a * right.a, right.a * left.b + right.b)


# ============================================================
# Kernels
# ============================================================

@njit(nogil=True, cache=True)
def _scan_kernel(a, b):
    n, d = a.shape
    for k in range(1, n):
        for j in range(d):
            b[k, j] = a[k, j] * b[k - 1, j] + b[k, j]
            a[k, j] = a[k - 1, j] * a[k, j]


@njit(nogil=True, cache=True)
def _carry_kernel(a, b, carry_a, carry_b):
    n, d = a.shape
    for k in range(n):
        for j in range(d):
            b[k, j] = a[k, j] * carry_b[j] + b[k, j]
            a[k, j] = carry_a[j] * a[k, j]


@njit(nogil=True, cache=True)
def _reverse_kernel(a_next, g, lam_after):
    # lam_k = g_k + a_next_k * lam_{k+1}, lam_after is lam just past the end
    n, d = g.shape
    lam = np.empty_like(g)
    for j in range(d):
        lam[n - 1, j] = g[n - 1, j] + a_next[n - 1, j] * lam_after[j]
    for k in range(n - 2, -1, -1):
        for j in range(d):
            lam[k, j] = g[k, j] + a_next[k, j] * lam[k + 1, j]
    return lam


def _flatten(pairs):
    if pairs.a.ndim == 0 or len(pairs) == 0:
        raise ContractError("scan needs a non-empty sequence of pairs")
    n = len(pairs)
    a = np.ascontiguousarray(pairs.a.reshape(n, -1)).copy()
    b = np.ascontiguousarray(pairs.b.reshape(n, -1)).copy()
    return a, b


def _check_finite(a, b, offset=0):
    bad = ~(np.isfinite(a).all(axis=1) & np.isfinite(b).all(axis=1))
    if bad.any():
        raise PropagationError("non-finite scan value", index=offset + int(np.argmax(bad)))


def _chunk_bounds(n, chunks):
    return np.linspace(0, n, chunks + 1).round().astype(np.int64)


# ============================================================
# Scans
# ============================================================

def scan_sequential(pairs: ScanPair, stats: Optional[ScanStats] = None) -> ScanPair:
    """Inclusive prefix combination, one element after the other."""
    shape = pairs.a.shape
    a, b = _flatten(pairs)
    _scan_kernel(a, b)
    _check_finite(a, b)
    if stats is not None:
        stats.combines += len(a) - 1
        stats.depth += len(a) - 1
    return ScanPair(a.reshape(shape), b.reshape(shape))


def scan_parallel(pairs: ScanPair, workers: int, executor=None,
                  stats: Optional[ScanStats] = None) -> ScanPair:
    """
    Three-phase chunked scan.

    1. every chunk is scanned independently on a worker;
    2. the chunk totals are scanned sequentially into carry-in prefixes;
    3. each chunk but the first is left-combined with its carry, in parallel.

    ``workers == 1`` runs the sequential kernel and is bitwise identical to
    ``scan_sequential``.
    """
    if workers < 1:
        raise ContractError(f"workers must be >= 1, got {workers}")

    n = len(pairs)
    chunks = min(workers, n)
    if chunks <= 1:
        return scan_sequential(pairs, stats=stats)

    shape = pairs.a.shape
    a, b = _flatten(pairs)
    bounds = _chunk_bounds(n, chunks)
    spans = [(int(bounds[c]), int(bounds[c + 1])) for c in range(chunks)]

    own_executor = executor is None
    if own_executor:
        executor = ThreadPoolExecutor(max_workers=workers)
    try:
        # ---------------- phase 1 ----------------
        list(executor.map(lambda span: _scan_kernel(a[span[0]:span[1]], b[span[0]:span[1]]), spans))

        # ---------------- phase 2 ----------------
        summary_a = np.stack([a[end - 1] for _, end in spans])
        summary_b = np.stack([b[end - 1] for _, end in spans])
        _scan_kernel(summary_a, summary_b)

        # ---------------- phase 3 ----------------
        def apply_carry(c):
            start, end = spans[c]
            _carry_kernel(a[start:end], b[start:end], summary_a[c - 1], summary_b[c - 1])

        list(executor.map(apply_carry, range(1, chunks)))
    finally:
        if own_executor:
            executor.shutdown(wait=True)

    _check_finite(a, b)
    if stats is not None:
        lengths = [end - start for start, end in spans]
        stats.combines += sum(length - 1 for length in lengths) + (chunks - 1) + (n - lengths[0])
        stats.depth += (max(lengths) - 1) + (chunks - 1) + max(lengths[1:])
    return ScanPair(a.reshape(shape), b.reshape(shape))


# ============================================================
# Adjoint
# ============================================================

def _reverse_lambda(a, g, workers, executor):
    """lam_k = g_k + conj(a_{k+1}) lam_{k+1}, as a forward scan over the reversed sequence."""
    a_rev = np.empty_like(a)
    a_rev[0] = 1.0
    a_rev[1:] = np.conj(a[::-1][:-1])
    scanned = scan_parallel(ScanPair(a_rev, g[::-1].copy()), workers, executor=executor)
    return scanned.b[::-1]


def adjoint_scan(pairs: ScanPair, output_grads, states=None, *, workers=1, executor=None,
                 checkpoint_every=None, recompute=True) -> ScanPair:
    """
    Cotangents of the scan leaves given cotangents of the states.

    Complex cotangents follow g = dL/dRe + i dL/dIm. With states h_k the
    adjoint recurrence is

        lam_k = g_k + conj(a_{k+1}) lam_{k+1}
        grad b_k = lam_k
        grad a_k = conj(h_{k-1}) lam_k        (h_{-1} = 0)

    Without ``states`` the forward pass is recomputed chunk by chunk from
    boundary checkpoints taken every ``checkpoint_every`` steps.
    """
    g = np.asarray(output_grads)
    if g.shape != pairs.a.shape:
        raise ContractError(f"output gradients have shape {g.shape}, pairs have {pairs.a.shape}")

    shape = pairs.a.shape
    n = len(pairs)
    a = np.ascontiguousarray(pairs.a.reshape(n, -1))
    g = np.ascontiguousarray(g.reshape(n, -1)).astype(a.dtype)

    if states is not None:
        h = np.asarray(states)
        if h.shape != shape:
            raise ContractError(f"forward states have shape {h.shape}, pairs have {shape}")
        h = h.reshape(n, -1)
        lam = _reverse_lambda(a, g, workers, executor)
        grad_a = np.zeros_like(lam)
        grad_a[1:] = np.conj(h[:-1]) * lam[1:]
        return ScanPair(grad_a.reshape(shape), lam.reshape(shape))

    if not recompute:
        raise ContractError("forward states are missing and recomputation is disabled")

    b = np.ascontiguousarray(pairs.b.reshape(n, -1))
    every = checkpoint_every or max(1, int(math.ceil(math.sqrt(n))))
    starts = list(range(0, n, every))

    # forward: keep only the state entering each chunk
    checkpoints = []
    carry = np.zeros(a.shape[1], dtype=a.dtype)
    for start in starts:
        end = min(start + every, n)
        checkpoints.append(carry.copy())
        chunk_a = a[start:end].copy()
        chunk_b = b[start:end].copy()
        chunk_b[0] += chunk_a[0] * carry
        _scan_kernel(chunk_a, chunk_b)
        _check_finite(chunk_a, chunk_b, offset=start)
        carry = chunk_b[-1]

    grad_a = np.empty_like(g)
    grad_b = np.empty_like(g)
    lam_after = np.zeros(a.shape[1], dtype=a.dtype)
    for start, h_in in zip(reversed(starts), reversed(checkpoints)):
        end = min(start + every, n)
        chunk_a = a[start:end].copy()
        chunk_b = b[start:end].copy()
        chunk_b[0] += chunk_a[0] * h_in
        _scan_kernel(chunk_a, chunk_b)

        a_next = np.empty_like(chunk_a)
        a_next[:-1] = np.conj(a[start + 1:end])
        a_next[-1] = np.conj(a[end]) if end < n else 0.0
        lam = _reverse_kernel(a_next, g[start:end], lam_after)

        h_prev = np.empty_like(chunk_b)
        h_prev[0] = h_in
        h_prev[1:] = chunk_b[:-1]
        grad_a[start:end] = np.conj(h_prev) * lam
        grad_b[start:end] = lam
        lam_after = lam[0]

    return ScanPair(grad_a.reshape(shape), grad_b.reshape(shape))
