#!/usr/bin/python3

"""
Point-cloud front end: 3-axis serialization, farthest point sampling,
kNN grouping and the grouped point-cloud classifier.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from stream_ssm.modules.errors import ConfigurationError, ContractError, DataError
from stream_ssm.modules.model import ModelConfig, StreamModel
from stream_ssm.modules.stream_layer import StreamParams, TokenBatch, TokenSequence, block_forward, make_variant

logger = logging.getLogger(__name__)

AXES = ("x", "y", "z")


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def as_points(points) -> np.ndarray:
    """(N, 3) float array from a sequence of ``Point3`` or an array."""
    array = np.asarray(points, dtype=np.float64)
    if array.ndim != 2 or array.shape[1] != 3:
        raise ContractError(f"points must have shape (N, 3), got {array.shape}")
    if array.shape[0] == 0:
        raise ContractError("the point set is empty")
    if not np.all(np.isfinite(array)):
        raise ContractError("points must have finite coordinates")
    return array


def lexicographic_order(points):
    """Indices sorting the points by (x, y, z)."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


# ============================================================
# Encoders
# ============================================================

@dataclass
class PointEncoder:
    """Point-wise two-layer MLP R^3 -> R^n with a ReLU in between."""
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, n, rng, hidden=None):
        hidden = hidden or 2 * n
        return cls(
            W1=rng.uniform(-1.0 / np.sqrt(3), 1.0 / np.sqrt(3), size=(3, hidden)),
            b1=np.zeros(hidden),
            W2=rng.uniform(-1.0 / np.sqrt(hidden), 1.0 / np.sqrt(hidden), size=(hidden, n)),
            b2=np.zeros(n),
        )

    @property
    def n(self):
        return self.W2.shape[1]

    def __call__(self, points):
        hidden = np.maximum(np.asarray(points, dtype=np.float64) @ self.W1 + self.b1, 0.0)
        return hidden @ self.W2 + self.b2


@dataclass
class AxisEmbedding:
    scale: np.ndarray   # (3, n)
    shift: np.ndarray   # (3, n)

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        if self.scale.ndim != 2 or self.scale.shape[0] != 3 or self.scale.shape != self.shift.shape:
            raise ContractError(f"axis embedding needs (3, n) scale and shift, got {self.scale.shape}, {self.shift.shape}")
        pairs = np.concatenate([self.scale, self.shift], axis=1)
        for i in range(3):
            for j in range(i + 1, 3):
                if np.array_equal(pairs[i], pairs[j]):
                    raise ContractError(f"axes {AXES[i]} and {AXES[j]} share the same scale/shift")

    @classmethod
    def init(cls, n, rng):
        return cls(1.0 + 0.1 * rng.normal(size=(3, n)), 0.1 * rng.normal(size=(3, n)))

    @property
    def n(self):
        return self.scale.shape[1]


# ============================================================
# Serialization
# ============================================================

def serialize_features(points, features, emb: AxisEmbedding) -> TokenSequence:
    """
    Concatenation of the point set sorted by x, by y and by z.

    Segment s holds the points in order of axis s (ties broken by (x, y, z)),
    its coordinate is that axis value and its features are
    ``scale_s * features + shift_s``. Gaps restart at every segment.
    """
    points = as_points(points)
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (points.shape[0], emb.n):
        raise ContractError(f"features have shape {features.shape}, expected {(points.shape[0], emb.n)}")

    t, U, segment = [], [], []
    for axis in range(3):
        order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], points[:, axis]))
        t.append(points[order, axis])
        U.append(emb.scale[axis] * features[order] + emb.shift[axis])
        segment.append(np.full(order.size, axis, dtype=np.int64))
    return TokenSequence(np.concatenate(t), np.concatenate(U), np.concatenate(segment))


def serialize_points(points, encoder, emb: AxisEmbedding) -> TokenSequence:
    points = as_points(points)
    return serialize_features(points, encoder(points), emb)


# ============================================================
# Sampling and grouping
# ============================================================

def _squared_distances(points, center):
    dx = points[:, 0] - center[0]
    dy = points[:, 1] - center[1]
    dz = points[:, 2] - center[2]
    return dx * dx + dy * dy + dz * dz


def fps(points, k, seed_index=None):
    """
    Farthest point sampling.

    Starts at ``seed_index`` (default: the lexicographically smallest point)
    and keeps adding the point farthest from the selection; ties go to the
    smaller index.
    """
    points = as_points(points)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"cannot sample {k} of {n} points")
    if seed_index is None:
        seed_index = int(lexicographic_order(points)[0])
    if not 0 <= seed_index < n:
        raise ContractError(f"seed index {seed_index} out of range")

    selected = [seed_index]
    nearest = _squared_distances(points, points[seed_index])
    nearest[seed_index] = -np.inf
    for _ in range(1, k):
        index = int(np.argmax(nearest))
        selected.append(index)
        nearest = np.minimum(nearest, _squared_distances(points, points[index]))
        nearest[selected] = -np.inf
    return np.array(selected, dtype=np.int64)


def knn_group(points, centers, k):
    """(len(centers), k) indices of the k nearest points per center, ties by smaller index."""
    points = as_points(points)
    if not 1 <= k <= points.shape[0]:
        raise ContractError(f"cannot group {k} of {points.shape[0]} points")
    groups = np.empty((len(centers), k), dtype=np.int64)
    for row, center in enumerate(centers):
        distances = _squared_distances(points, points[center])
        groups[row] = np.argsort(distances, kind="stable")[:k]
    return groups


# ============================================================
# Point-cloud classifier
# ============================================================

class PointCloudModel:
    """
    FPS centers, kNN groups serialized relative to their center and encoded by
    a local STREAM block, then the serialized centers carry the pooled group
    features through the backbone.

    Forward only: this is the inference reference head for point inputs.
    ``train_toy`` and the CLI run on event streams and reject
    ``input="points"``.
    """

    def __init__(self, config: ModelConfig, encoder, local_embedding, local_block, center_embedding, backbone):
        self.config = config
        self.encoder = encoder
        self.local_embedding = local_embedding
        self.local_block = local_block
        self.center_embedding = center_embedding
        self.backbone = backbone

    @classmethod
    def init(cls, config: ModelConfig, rng):
        if config.input != "points":
            raise ConfigurationError(f"point-cloud model needs input='points', got '{config.input}'")
        return cls(
            config,
            encoder=PointEncoder.init(config.n, rng),
            local_embedding=AxisEmbedding.init(config.n, rng),
            local_block=StreamParams.init(config.n, config.m, make_variant(config.variant), rng, norm=config.norm),
            center_embedding=AxisEmbedding.init(config.n, rng),
            backbone=StreamModel.init(config, rng),
        )

    def group_features(self, points, workers=1, executor=None):
        """Returns the center indices and one pooled feature vector per group."""
        points = as_points(points)
        num_groups = min(self.config.num_groups, points.shape[0])
        group_size = min(self.config.group_size, points.shape[0])
        centers = fps(points, num_groups)
        groups = knn_group(points, centers, group_size)

        sequences = [
            serialize_points(points[group] - points[center], self.encoder, self.local_embedding)
            for center, group in zip(centers, groups)
        ]
        batch = TokenBatch.stack(sequences)
        out, _ = block_forward(self.local_block, batch.U, batch.gaps(), workers=workers, executor=executor)
        return centers, out.mean(axis=1)

    def forward(self, points, workers=1, executor=None):
        """Logits (classes,) for one point cloud."""
        points = as_points(points)
        centers, pooled = self.group_features(points, workers=workers, executor=executor)
        seq = serialize_features(points[centers], pooled, self.center_embedding)
        logits, _ = self.backbone.forward(seq.as_batch(), workers=workers, executor=executor)
        return logits[0]


# ============================================================
# Point files
# ============================================================

def read_points_text(path):
    """One "x y z" triple per line; blank lines are ignored."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise DataError(f"expected 3 coordinates, got {len(fields)}", line=number, path=path)
            try:
                row = [float(value) for value in fields]
            except ValueError:
                raise DataError(f"not a number in '{line.strip()}'", line=number, path=path)
            if not np.all(np.isfinite(row)):
                raise DataError("non-finite coordinate", line=number, path=path)
            rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_points_text(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in points.tolist():
            f.write(f"{x!r} {y!r} {z!r}\n")


def read_points_binary(path):
    """Packed little-endian float64 triples."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) % 24:
        raise DataError(f"truncated record ({len(data)} bytes is not a multiple of 24)",
                        line=len(data) // 24 + 1, path=path)
    points = np.frombuffer(data, dtype="<f8").reshape(-1, 3).astype(np.float64)
    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        raise DataError("non-finite coordinate", line=int(np.argmax(bad)) + 1, path=path)
    return points


def write_points_binary(path, points):
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(points, dtype="<f8").tobytes())
