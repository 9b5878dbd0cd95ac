#!/usr/bin/python3

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np

from stream_ssm.modules.errors import ConfigurationError, ContractError
from stream_ssm.modules.stream_layer import (
    RMS_EPS, StreamParams, TokenBatch, TokenSequence, block_backward, block_forward, canonical_row, make_variant,
)

logger = logging.getLogger(__name__)

INPUT_KINDS = ("events", "features", "points")


@dataclass(frozen=True)
class SubsampleStage:
    position: int
    factor: int
    width_multiplier: int = 1


@dataclass
class ModelConfig:
    n: int = 8
    m: int = 4
    layers: int = 2
    subsample_schedule: List[SubsampleStage] = field(default_factory=list)
    variant: str = "stream-00"
    group_size: int = 32
    num_groups: int = 16
    classes: int = 2
    input: str = "events"
    sensor_width: int = 2
    sensor_height: int = 2
    median_gap: float = 1e-3
    norm: bool = True
    final_norm: bool = True

    def __post_init__(self):
        self.subsample_schedule = [
            stage if isinstance(stage, SubsampleStage) else SubsampleStage(*stage)
            for stage in self.subsample_schedule
        ]
        self.variant = canonical_row(self.variant)
        if min(self.n, self.m, self.layers, self.classes) < 1:
            raise ConfigurationError("n, m, layers and classes must be positive")
        if self.input not in INPUT_KINDS:
            raise ConfigurationError(f"input must be one of {INPUT_KINDS}, got '{self.input}'")
        if self.median_gap <= 0.0:
            raise ConfigurationError("median_gap must be positive")
        positions = [stage.position for stage in self.subsample_schedule]
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ConfigurationError(f"subsample positions must be strictly increasing, got {positions}")
        for stage in self.subsample_schedule:
            if not 1 <= stage.position <= self.layers:
                raise ConfigurationError(f"subsample position {stage.position} outside 1..{self.layers}")
            if stage.factor < 1 or stage.width_multiplier < 1:
                raise ConfigurationError("subsample factors and width multipliers must be >= 1")

    @property
    def vocab_size(self):
        return 2 * self.sensor_width * self.sensor_height

    @property
    def total_subsample(self):
        return int(np.prod([stage.factor for stage in self.subsample_schedule], dtype=np.int64))

    def block_state_dims(self):
        dims, m = [], self.m
        stages = {stage.position: stage for stage in self.subsample_schedule}
        for i in range(self.layers):
            if i in stages:
                m *= stages[i].width_multiplier
            dims.append(m)
        return dims

    def to_dict(self):
        data = asdict(self)
        data["subsample_schedule"] = [
            [stage.position, stage.factor, stage.width_multiplier] for stage in self.subsample_schedule
        ]
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# ============================================================
# Model
# ============================================================

@dataclass
class ModelCache:
    trace: list
    final: TokenBatch
    xhat: Optional[np.ndarray]
    rms: Optional[np.ndarray]
    pooled: np.ndarray


class StreamModel:
    """Stack of STREAM blocks with strided subsampling, average pooling and a linear head."""

    def __init__(self, config: ModelConfig, blocks, head_W, head_b, head_norm=None, embedding=None):
        self.config = config
        self.blocks = list(blocks)
        self.head_W = head_W
        self.head_b = head_b
        self.head_norm = head_norm
        self.embedding = embedding
        self._factors = {stage.position: stage.factor for stage in config.subsample_schedule}

    @classmethod
    def init(cls, config: ModelConfig, rng):
        variant = make_variant(config.variant)
        blocks = [
            StreamParams.init(config.n, m, variant, rng, median_gap=config.median_gap, norm=config.norm)
            for m in config.block_state_dims()
        ]
        bound = 1.0 / np.sqrt(config.n)
        embedding = rng.normal(size=(config.vocab_size, config.n)) if config.input == "events" else None
        return cls(
            config,
            blocks,
            head_W=rng.uniform(-bound, bound, size=(config.n, config.classes)),
            head_b=np.zeros(config.classes),
            head_norm=np.ones(config.n) if config.final_norm else None,
            embedding=embedding,
        )

    # ---------------- parameters ----------------

    def tensors(self):
        tensors = {}
        if self.embedding is not None:
            tensors["embedding"] = self.embedding
        for i, block in enumerate(self.blocks):
            for name, array in block.tensors().items():
                tensors[f"blocks.{i}.{name}"] = array
        if self.head_norm is not None:
            tensors["head.norm"] = self.head_norm
        tensors["head.W"] = self.head_W
        tensors["head.b"] = self.head_b
        return tensors

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors):
        variant = make_variant(config.variant)
        blocks = []
        for i in range(config.layers):
            prefix = f"blocks.{i}."
            block_tensors = {name[len(prefix):]: array for name, array in tensors.items() if name.startswith(prefix)}
            blocks.append(StreamParams.from_tensors(block_tensors, variant))
        try:
            return cls(
                config,
                blocks,
                head_W=np.array(tensors["head.W"]),
                head_b=np.array(tensors["head.b"]),
                head_norm=np.array(tensors["head.norm"]) if "head.norm" in tensors else None,
                embedding=np.array(tensors["embedding"]) if "embedding" in tensors else None,
            )
        except KeyError as e:
            raise ContractError(f"missing model tensor {e}")

    # ---------------- inputs ----------------

    def embed(self, ids):
        if self.embedding is None:
            raise ContractError("this model has no token embedding")
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.embedding.shape[0]):
            raise ContractError(f"token id outside vocabulary of {self.embedding.shape[0]}")
        return self.embedding[ids]

    def embed_backward(self, ids, grad_U):
        grad = np.zeros_like(self.embedding)
        np.add.at(grad, np.asarray(ids, dtype=np.int64).reshape(-1), grad_U.reshape(-1, grad_U.shape[-1]))
        return grad

    def check_length(self, length):
        needed = self.config.total_subsample
        if length < needed:
            raise ConfigurationError(
                f"sequence of {length} tokens is shorter than the cumulative subsample factor {needed}")

    # ---------------- forward ----------------

    def forward(self, batch: TokenBatch, workers=1, executor=None):
        """Returns logits (B, classes) and the cache for ``backward``."""
        self.check_length(batch.length)
        trace = []
        x = batch
        for i, params in enumerate(self.blocks):
            if i in self._factors:
                trace.append(("subsample", self._factors[i], x.length))
                x = x.subsample(self._factors[i])
            out, cache = block_forward(params, x.U, x.gaps(), workers=workers, executor=executor)
            trace.append(("block", i, cache))
            x = x.with_features(out)
        if len(self.blocks) in self._factors:
            factor = self._factors[len(self.blocks)]
            trace.append(("subsample", factor, x.length))
            x = x.subsample(factor)

        features, xhat, rms = self.head_features(x.U)
        pooled = features.mean(axis=1)
        logits = pooled @ self.head_W + self.head_b
        return logits, ModelCache(trace, x, xhat, rms, pooled)

    def head_features(self, U):
        if self.head_norm is None:
            return U, None, None
        rms = np.sqrt(np.mean(U * U, axis=-1) + RMS_EPS)
        xhat = U / rms[..., None]
        return xhat * self.head_norm, xhat, rms

    # ---------------- backward ----------------

    def backward(self, cache: ModelCache, grad_logits, workers=1, executor=None):
        """Returns (gradients by tensor name, gradient w.r.t. the input features)."""
        grads = {}
        grads["head.W"] = cache.pooled.T @ grad_logits
        grads["head.b"] = grad_logits.sum(axis=0)
        d_pooled = grad_logits @ self.head_W.T

        length = cache.final.length
        d_features = np.repeat(d_pooled[:, None, :] / length, length, axis=1)
        if self.head_norm is not None:
            grads["head.norm"] = (d_features * cache.xhat).sum(axis=(0, 1))
            d_xhat = d_features * self.head_norm
            projection = np.mean(d_xhat * cache.xhat, axis=-1, keepdims=True)
            d_x = (d_xhat - cache.xhat * projection) / cache.rms[..., None]
        else:
            d_x = d_features

        for kind, key, payload in reversed(cache.trace):
            if kind == "subsample":
                factor, previous_length = key, payload
                expanded = np.zeros((d_x.shape[0], previous_length, d_x.shape[2]))
                keep = np.arange(factor - 1, previous_length - previous_length % factor, factor)
                expanded[:, keep] = d_x
                d_x = expanded
            else:
                block_grads, d_x = block_backward(self.blocks[key], payload, d_x, workers=workers, executor=executor)
                for name, grad in block_grads.items():
                    grads[f"blocks.{key}.{name}"] = grad
        return grads, d_x


def stack_forward(model: StreamModel, seq: TokenSequence, workers=1, executor=None) -> np.ndarray:
    """Logits (classes,) of one token sequence."""
    logits, _ = model.forward(seq.as_batch(), workers=workers, executor=executor)
    return logits[0]
