#!/usr/bin/python3

"""
STREAM / Mamba parameterizations and the multi-input multi-output block.

Block data flow for features x (B, L, n) and coordinate gaps (B, L):

    z   = RMSNorm(x) * g                        (skipped when norm_weight is None)
    v   = z W_in + b_in                         token inputs u_k, one per channel
    B_k = v_k W_B,  C_k = v_k W_C               shared by all channels
    Delta, Gamma                                per variant, see discretize_stream
    h   = scan( exp(A Delta), Gamma B v )       one diagonal SISO system per channel
    y   = s Re(C . h)
    out = x + y W_out + b_out
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from stream_ssm.modules.errors import ConfigurationError, ContractError, OrderError, PropagationError
from stream_ssm.modules.numerics import inverse_softplus, sigmoid, softplus
from stream_ssm.modules.scan import ScanPair, adjoint_scan, scan_parallel
from stream_ssm.modules.ssm_core import DiagonalMatrixA, SisoStep

logger = logging.getLogger(__name__)

RMS_EPS = 1e-6


# ============================================================
# Variants
# ============================================================

@dataclass(frozen=True)
class VariantFlags:
    use_timestamps: bool
    delta_softplus_linear: bool
    gamma_softplus_linear: bool

    def __post_init__(self):
        if not self.use_timestamps and not self.delta_softplus_linear:
            raise ConfigurationError("a variant without timestamps needs the softplus+Linear step size")


VARIANT_ROWS = {
    "mamba":     VariantFlags(use_timestamps=False, delta_softplus_linear=True, gamma_softplus_linear=True),
    "stream-00": VariantFlags(use_timestamps=True, delta_softplus_linear=False, gamma_softplus_linear=False),
    "stream-0G": VariantFlags(use_timestamps=True, delta_softplus_linear=False, gamma_softplus_linear=True),
    "stream-D0": VariantFlags(use_timestamps=True, delta_softplus_linear=True, gamma_softplus_linear=False),
    "stream-DG": VariantFlags(use_timestamps=True, delta_softplus_linear=True, gamma_softplus_linear=True),
}

_ROW_ALIASES = {"stream-0Γ": "stream-0G", "stream-Δ0": "stream-D0", "stream-ΔΓ": "stream-DG"}


def canonical_row(row):
    row = _ROW_ALIASES.get(row, row)
    if row not in VARIANT_ROWS:
        raise ConfigurationError(f"unknown ablation row '{row}', expected one of {sorted(VARIANT_ROWS)}")
    return row


def make_variant(row) -> VariantFlags:
    return VARIANT_ROWS[canonical_row(row)]


# ============================================================
# Token sequences
# ============================================================

def _gaps(t, segment):
    gaps = np.zeros_like(t)
    gaps[..., 1:] = t[..., 1:] - t[..., :-1]
    gaps[..., 0] = 0.0
    if segment is not None:
        gaps[..., 1:][segment[..., 1:] != segment[..., :-1]] = 0.0
    return gaps


@dataclass
class TokenBatch:
    """
    Equal-length token sequences stacked on a leading batch axis.

    ``segment`` optionally labels contiguous runs; coordinates only need to be
    nondecreasing within a run and the gap is reset to zero at run starts.
    """
    t: np.ndarray
    U: np.ndarray
    segment: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        if self.t.ndim != 2 or self.U.ndim != 3:
            raise ContractError(f"expected t (B, L) and U (B, L, n), got {self.t.shape} and {self.U.shape}")
        if self.U.shape[:2] != self.t.shape:
            raise ContractError(f"feature rows {self.U.shape[:2]} do not match coordinates {self.t.shape}")
        if self.t.shape[1] < 1:
            raise ContractError("token sequences must be non-empty")
        if self.segment is not None:
            self.segment = np.asarray(self.segment)
            if self.segment.shape != self.t.shape:
                raise ContractError("segment ids must match coordinates")
        if not np.all(np.isfinite(self.t)):
            raise PropagationError("non-finite coordinate", index=int(np.argmin(np.isfinite(self.t).all(axis=0))))
        if np.any(self.gaps() < 0.0):
            bad = np.argwhere(self.gaps() < 0.0)[0]
            raise OrderError(f"coordinates must be nondecreasing, violated at token {int(bad[1])}")

    @property
    def size(self):
        return self.t.shape[0]

    @property
    def length(self):
        return self.t.shape[1]

    def gaps(self):
        return _gaps(self.t, self.segment)

    def with_features(self, U):
        return TokenBatch(self.t, U, self.segment)

    def subsample(self, factor):
        """Keeps tokens r-1, 2r-1, ...; gaps of the result add up the dropped ones."""
        keep = np.arange(factor - 1, self.length - self.length % factor, factor)
        segment = None if self.segment is None else self.segment[:, keep]
        return TokenBatch(self.t[:, keep], self.U[:, keep], segment)

    @classmethod
    def stack(cls, sequences):
        lengths = {len(s) for s in sequences}
        if len(lengths) != 1:
            raise ContractError(f"cannot stack sequences of lengths {sorted(lengths)}")
        segments = [s.segment for s in sequences]
        segment = None if all(s is None for s in segments) else np.stack(
            [np.zeros(len(s), dtype=np.int64) if s.segment is None else s.segment for s in sequences])
        return cls(np.stack([s.t for s in sequences]), np.stack([s.U for s in sequences]), segment)


@dataclass
class TokenSequence:
    t: np.ndarray
    U: np.ndarray
    segment: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        if self.segment is not None:
            self.segment = np.asarray(self.segment)
        # validation is shared with the batch form
        self.as_batch()

    def __len__(self):
        return self.t.shape[0]

    def gaps(self):
        return _gaps(self.t, self.segment)

    def as_batch(self):
        segment = None if self.segment is None else self.segment[None]
        return TokenBatch(self.t[None], self.U[None], segment)


# ============================================================
# Parameters
# ============================================================

PARAM_NAMES = (
    "a_raw", "a_imag", "delta", "W_in", "b_in", "W_B", "W_C",
    "W_gamma", "gamma_bias", "W_delta", "W_out", "b_out", "norm_weight",
)


@dataclass
class StreamParams:
    a_raw: np.ndarray        # (d, m)   Re(A) = -softplus(a_raw)
    a_imag: np.ndarray       # (d, m)
    delta: np.ndarray        # (d,)     learnable time scale, pre-softplus
    W_in: np.ndarray         # (n, d)
    b_in: np.ndarray         # (d,)
    W_B: np.ndarray          # (d, m)
    W_C: np.ndarray          # (d, m)
    W_gamma: np.ndarray      # (d, d)
    gamma_bias: np.ndarray   # (d,)
    W_delta: np.ndarray      # (d, d)   step-size projection, unused by stream-00 / stream-0G
    W_out: np.ndarray        # (d, n)
    b_out: np.ndarray        # (n,)
    norm_weight: Optional[np.ndarray] = None
    variant: VariantFlags = field(default_factory=lambda: VARIANT_ROWS["stream-00"])
    conjugate_pairs: bool = True

    @classmethod
    def init(cls, n, m, variant, rng, median_gap=1.0, dt_range=(0.01, 1.0), norm=True, d=None):
        """
        Projections uniform in +-1/sqrt(fan_in); A starts at -0.5 + i pi j;
        softplus(delta) * median_gap is log-uniform in ``dt_range``.
        """
        if isinstance(variant, str):
            variant = make_variant(variant)
        d = n if d is None else d
        if n < 1 or m < 1 or d < 1:
            raise ConfigurationError(f"dimensions must be positive, got n={n}, m={m}, d={d}")

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), size=d))
        time_scale = dt if not variant.use_timestamps else dt / median_gap

        return cls(
            a_raw=np.full((d, m), float(inverse_softplus(0.5))),
            a_imag=np.tile(np.pi * np.arange(m, dtype=np.float64), (d, 1)),
            delta=inverse_softplus(time_scale),
            W_in=uniform(n, (n, d)),
            b_in=np.zeros(d),
            W_B=uniform(d, (d, m)),
            W_C=uniform(d, (d, m)),
            W_gamma=uniform(d, (d, d)),
            gamma_bias=np.zeros(d),
            W_delta=uniform(d, (d, d)),
            W_out=uniform(d, (d, n)),
            b_out=np.zeros(n),
            norm_weight=np.ones(n) if norm else None,
            variant=variant,
        )

    @property
    def n(self):
        return self.W_in.shape[0]

    @property
    def d(self):
        return self.W_in.shape[1]

    @property
    def m(self):
        return self.a_raw.shape[1]

    @property
    def A(self):
        return -softplus(self.a_raw) + 1j * self.a_imag

    @property
    def readout_scale(self):
        return 2.0 if self.conjugate_pairs else 1.0

    def channel_matrix(self, channel) -> DiagonalMatrixA:
        return DiagonalMatrixA(self.A[channel], conjugate_pairs=self.conjugate_pairs)

    def tensors(self):
        """Trainable arrays by name; the arrays are shared, not copied."""
        return {name: getattr(self, name) for name in PARAM_NAMES if getattr(self, name) is not None}

    def copy(self):
        return replace(self, **{name: array.copy() for name, array in self.tensors().items()})

    @classmethod
    def from_tensors(cls, tensors, variant, conjugate_pairs=True):
        missing = [name for name in PARAM_NAMES if name != "norm_weight" and name not in tensors]
        if missing:
            raise ContractError(f"missing layer tensors: {missing}")
        kwargs = {name: np.array(tensors[name], dtype=np.float64) for name in PARAM_NAMES if name in tensors}
        return cls(variant=variant, conjugate_pairs=conjugate_pairs, **kwargs)


# ============================================================
# Discretization
# ============================================================

@dataclass
class Discretization:
    """Per-step SSM inputs of one block (all arrays batched: B, L, ...)."""
    x: np.ndarray
    xhat: Optional[np.ndarray]
    rms: Optional[np.ndarray]
    z: np.ndarray
    v: np.ndarray
    gaps: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    b_proj: np.ndarray
    c_proj: np.ndarray
    delta_pre: Optional[np.ndarray]
    gamma_pre: Optional[np.ndarray]

    def siso_steps(self, channel, batch=0):
        """The SISO steps seen by one channel, for comparison with ssm_core."""
        b = self.gamma[batch, :, channel, None] * self.b_proj[batch]
        return [
            SisoStep(self.delta[batch, k, channel], b[k], self.c_proj[batch, k], self.v[batch, k, channel])
            for k in range(self.v.shape[1])
        ]


def _discretize(params: StreamParams, x, gaps) -> Discretization:
    if x.shape[-1] != params.n:
        raise ContractError(f"features have width {x.shape[-1]}, layer expects {params.n}")

    if params.norm_weight is not None:
        rms = np.sqrt(np.mean(x * x, axis=-1) + RMS_EPS)
        xhat = x / rms[..., None]
        z = xhat * params.norm_weight
    else:
        rms = xhat = None
        z = x

    v = z @ params.W_in + params.b_in
    b_proj = v @ params.W_B
    c_proj = v @ params.W_C

    flags = params.variant
    delta_pre = gamma_pre = None
    if flags.delta_softplus_linear:
        delta_pre = v @ params.W_delta + params.delta
        rate = softplus(delta_pre)
        delta = gaps[..., None] * rate if flags.use_timestamps else rate
    else:
        delta = gaps[..., None] * softplus(params.delta)

    if not flags.use_timestamps:
        gamma = delta
    elif flags.gamma_softplus_linear:
        gamma_pre = v @ params.W_gamma + params.gamma_bias
        gamma = softplus(gamma_pre)
    else:
        gamma = np.ones_like(v)

    return Discretization(x, xhat, rms, z, v, gaps, delta, gamma, b_proj, c_proj, delta_pre, gamma_pre)


def discretize_stream(params: StreamParams, seq: TokenSequence) -> Discretization:
    """
    Delta_k = (t_k - t_{k-1}) softplus(delta), Delta_0 = 0
    B_k = Gamma_k Linear(u_k),  C_k = Linear(u_k),  Gamma_k = softplus(Linear(u_k))

    or the Mamba / ablation forms selected by ``params.variant``.
    """
    batch = seq.as_batch() if isinstance(seq, TokenSequence) else seq
    return _discretize(params, batch.U, batch.gaps())


# ============================================================
# Forward / backward
# ============================================================

@dataclass
class BlockCache:
    disc: Discretization
    alpha: np.ndarray
    beta: np.ndarray
    states: np.ndarray
    ys: np.ndarray
    h0: Optional[np.ndarray]


def _to_sequence_major(array):
    return np.ascontiguousarray(np.moveaxis(array, 1, 0))


def _to_batch_major(array):
    return np.moveaxis(array, 0, 1)


def block_forward(params: StreamParams, x, gaps, h0=None, workers=1, executor=None):
    """
    Batched block on x (B, L, n) with gaps (B, L).

    ``h0`` (B, d, m) continues from a previous state. Returns the block
    output and the cache for ``block_backward``; the final states are
    ``cache.states[:, -1]``.
    """
    disc = _discretize(params, x, gaps)
    alpha = np.exp(params.A * disc.delta[..., None])
    beta = (disc.gamma[..., None] * disc.b_proj[:, :, None, :] * disc.v[..., None]).astype(np.complex128)
    if h0 is not None:
        beta[:, 0] += alpha[:, 0] * h0

    scanned = scan_parallel(ScanPair(_to_sequence_major(alpha), _to_sequence_major(beta)),
                            workers, executor=executor)
    states = _to_batch_major(scanned.b)

    ys = params.readout_scale * np.einsum("bljm,blm->blj", states.real, disc.c_proj)
    out = x + ys @ params.W_out + params.b_out
    return out, BlockCache(disc, alpha, beta, states, ys, h0)


def block_backward(params: StreamParams, cache: BlockCache, grad_out, workers=1, executor=None):
    """Returns (gradients by tensor name, gradient w.r.t. the block input)."""
    if cache.h0 is not None:
        raise ContractError("backward through a block started from a carried state is not supported")

    disc = cache.disc
    flags = params.variant
    v = disc.v
    grads = {name: np.zeros_like(array) for name, array in params.tensors().items()}
    grad_x = np.array(grad_out, dtype=np.float64, copy=True)

    # ---------------- output projection ----------------
    grads["W_out"] = np.einsum("blj,bln->jn", cache.ys, grad_out)
    grads["b_out"] = grad_out.sum(axis=(0, 1))
    d_ys = grad_out @ params.W_out.T

    # ---------------- readout ----------------
    scale = params.readout_scale
    d_cproj = scale * np.einsum("blj,bljm->blm", d_ys, cache.states.real)
    g_states = (scale * d_ys[..., None] * disc.c_proj[:, :, None, :]).astype(np.complex128)

    # ---------------- adjoint scan ----------------
    adjoint = adjoint_scan(
        ScanPair(_to_sequence_major(cache.alpha), _to_sequence_major(cache.beta)),
        _to_sequence_major(g_states),
        states=_to_sequence_major(cache.states),
        workers=workers,
        executor=executor,
    )
    g_alpha = _to_batch_major(adjoint.a)
    d_beta = _to_batch_major(adjoint.b).real

    # ---------------- transition exp(A Delta) ----------------
    A = params.A
    g_exponent = np.conj(cache.alpha) * g_alpha
    d_delta = (np.conj(A) * g_exponent).real.sum(axis=-1)
    dA = np.einsum("blj,bljm->jm", disc.delta, g_exponent)
    grads["a_raw"] = dA.real * -sigmoid(params.a_raw)
    grads["a_imag"] = dA.imag

    # ---------------- input injection Gamma B v ----------------
    beta_b = np.einsum("bljm,blm->blj", d_beta, disc.b_proj)
    d_gamma = beta_b * v
    d_v = beta_b * disc.gamma
    d_bproj = np.einsum("bljm,blj->blm", d_beta, disc.gamma * v)

    grads["W_B"] = np.einsum("blj,blm->jm", v, d_bproj)
    grads["W_C"] = np.einsum("blj,blm->jm", v, d_cproj)
    d_v += d_bproj @ params.W_B.T + d_cproj @ params.W_C.T

    # ---------------- Gamma ----------------
    if not flags.use_timestamps:
        d_delta = d_delta + d_gamma
    elif flags.gamma_softplus_linear:
        d_pre = d_gamma * sigmoid(disc.gamma_pre)
        grads["W_gamma"] = np.einsum("blj,blk->jk", v, d_pre)
        grads["gamma_bias"] = d_pre.sum(axis=(0, 1))
        d_v += d_pre @ params.W_gamma.T

    # ---------------- Delta ----------------
    if flags.delta_softplus_linear:
        d_pre = d_delta * sigmoid(disc.delta_pre)
        if flags.use_timestamps:
            d_pre = d_pre * disc.gaps[..., None]
        grads["W_delta"] = np.einsum("blj,blk->jk", v, d_pre)
        grads["delta"] = d_pre.sum(axis=(0, 1))
        d_v += d_pre @ params.W_delta.T
    else:
        grads["delta"] = (d_delta * disc.gaps[..., None]).sum(axis=(0, 1)) * sigmoid(params.delta)

    # ---------------- input projection and norm ----------------
    grads["W_in"] = np.einsum("bln,blj->nj", disc.z, d_v)
    grads["b_in"] = d_v.sum(axis=(0, 1))
    d_z = d_v @ params.W_in.T

    if params.norm_weight is not None:
        grads["norm_weight"] = (d_z * disc.xhat).sum(axis=(0, 1))
        d_xhat = d_z * params.norm_weight
        projection = np.mean(d_xhat * disc.xhat, axis=-1, keepdims=True)
        grad_x += (d_xhat - disc.xhat * projection) / disc.rms[..., None]
    else:
        grad_x += d_z

    return grads, grad_x


def mimo_forward(params: StreamParams, seq: TokenSequence, workers=1, executor=None) -> np.ndarray:
    """n channel SISO scans wrapped by linear maps and a residual path; returns (L, n)."""
    batch = seq.as_batch()
    out, _ = block_forward(params, batch.U, batch.gaps(), workers=workers, executor=executor)
    return out[0]


def mimo_step(params: StreamParams, x_k, gap, state):
    """
    Constant-time update for one incoming token.

    ``state`` is the (d, m) state after the previous token, or None before
    the first one. Returns (output (n,), new state).
    """
    x = np.asarray(x_k, dtype=np.float64)[None, None, :]
    gaps = np.array([[0.0 if state is None else float(gap)]])
    h0 = None if state is None else state[None]
    out, cache = block_forward(params, x, gaps, h0=h0)
    return out[0, 0], cache.states[0, -1]
