#!/usr/bin/python3

"""
Desk-scale training: loss, AdamW, the synthetic gap task and the toy
ablation loop.
"""

import logging
import os
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Dict, List, Tuple

import numpy as np

from stream_ssm.modules.errors import ConfigurationError, ContractError, PropagationError, TrainingDivergedError
from stream_ssm.modules.events import (
    EventAugmentConfig, EventStream, augment_events, event_cutmix, event_times, event_token_ids, make_events,
)
from stream_ssm.modules.model import ModelConfig, StreamModel
from stream_ssm.modules.numerics import make_rng
from stream_ssm.modules.stream_layer import TokenBatch

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.txt"
DUMP_FILE = "divergence_dump.txt"


@dataclass
class TrainConfig:
    lr: float = 3e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch: int = 32
    epochs: int = 10
    seed: int = 0
    grad_clip: float = 1.0
    warmup_steps: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0.0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.batch < 1:
            raise ConfigurationError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0 or self.warmup_steps < 0:
            raise ConfigurationError("epochs and warmup_steps must be >= 0")
        if not all(0.0 <= beta < 1.0 for beta in self.betas):
            raise ConfigurationError(f"betas must lie in [0, 1), got {self.betas}")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# ============================================================
# Loss
# ============================================================

def cross_entropy(logits, target):
    """
    Mean cross entropy over the rows of ``logits`` (B, C) or a single row (C,).

    ``target`` is an integer class per row or a soft label per row. Returns
    the loss and its gradient with respect to ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    target = np.asarray(target)
    hard = target.ndim == logits.ndim - 1
    logits = np.atleast_2d(logits)
    if not np.all(np.isfinite(logits)):
        bad = ~np.isfinite(logits).all(axis=1)
        raise PropagationError("cross entropy of non-finite logits", index=int(np.argmax(bad)))

    if hard:
        target = np.eye(logits.shape[1])[np.atleast_1d(target).astype(np.int64)]
    target = np.atleast_2d(target).astype(np.float64)
    if target.shape != logits.shape:
        raise ContractError(f"targets have shape {target.shape}, logits {logits.shape}")
    if not np.allclose(target.sum(axis=1), 1.0):
        raise ContractError("soft labels must sum to 1")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = logits.shape[0]
    loss = float(-(target * log_probs).sum() / rows)
    grad = (np.exp(log_probs) - target) / rows
    return loss, grad[0] if single else grad


# ============================================================
# Optimizer
# ============================================================

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_step(params, grads, state: AdamState, config: TrainConfig) -> AdamState:
    """
    One bias-corrected AdamW update, applied in place to the arrays of
    ``params``. Non-finite gradients skip the step and leave everything as is.
    """
    norm = global_norm(grads)
    if not np.isfinite(norm):
        state.skipped += 1
        logger.warning("Skipping optimizer step %d: non-finite gradient", state.step + 1)
        return state

    scale = config.grad_clip / norm if config.grad_clip and norm > config.grad_clip else 1.0
    state.step += 1
    beta1, beta2 = config.betas
    lr = config.lr
    if config.warmup_steps:
        lr *= min(1.0, state.step / config.warmup_steps)
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        grad = grad * scale
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if config.weight_decay:
            param -= lr * config.weight_decay * param
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
    return state


# ============================================================
# Data
# ============================================================

@dataclass
class EventDataset:
    streams: List[EventStream]
    labels: np.ndarray
    classes: int = 2

    def __len__(self):
        return len(self.streams)


def make_gap_task(rng, size, length=128, period_us=1000, width=2, height=2, jitter=0.1):
    """
    Two classes with the same token-id statistics, token counts and mean gap.

    Class 0 gaps are ``p (1 + jitter U)``, class 1 gaps alternate ``0.25 p``
    and ``1.75 p`` with the same multiplicative jitter (U uniform in [-1, 1]).
    Labels are balanced.
    """
    if size < 1 or length < 2:
        raise ConfigurationError("the gap task needs size >= 1 and length >= 2")
    labels = rng.permutation(np.arange(size) % 2)
    vocab = 2 * width * height
    alternating = np.where(np.arange(length - 1) % 2 == 0, 0.25, 1.75)

    streams = []
    for label in labels:
        noise = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=length - 1)
        base = alternating if label == 1 else np.ones(length - 1)
        gaps = np.round(period_us * base * noise).astype(np.int64)
        t = np.concatenate([[0], np.cumsum(gaps)])
        ids = rng.integers(0, vocab, size=length)
        p, rest = np.divmod(ids, width * height)
        y, x = np.divmod(rest, width)
        streams.append(EventStream(make_events(t, x, y, p), width, height))
    return EventDataset(streams, labels.astype(np.int64), classes=2)


def token_histograms(dataset: EventDataset):
    """Token-id counts per class, shape ``(classes, 2 * width * height)``."""
    first = dataset.streams[0]
    vocab = 2 * first.width * first.height
    counts = np.zeros((dataset.classes, vocab), dtype=np.int64)
    for stream, label in zip(dataset.streams, dataset.labels):
        counts[label] += np.bincount(event_token_ids(stream.events, stream.width, stream.height), minlength=vocab)
    return counts


def split_dataset(dataset: EventDataset, train_size):
    head = EventDataset(dataset.streams[:train_size], dataset.labels[:train_size], dataset.classes)
    tail = EventDataset(dataset.streams[train_size:], dataset.labels[train_size:], dataset.classes)
    return head, tail


# ============================================================
# Loop
# ============================================================

def _grouped_batches(streams, targets):
    """Groups samples of equal length; yields (indices, ids, times, targets) per group."""
    groups = defaultdict(list)
    for index, stream in enumerate(streams):
        groups[len(stream)].append(index)
    for length in sorted(groups):
        indices = groups[length]
        ids = np.stack([event_token_ids(streams[i].events, streams[i].width, streams[i].height) for i in indices])
        times = np.stack([event_times(streams[i].events) for i in indices])
        yield indices, ids, times, targets[indices]


def batch_loss(model: StreamModel, streams, targets, workers=1, executor=None, with_grads=True):
    """
    Mean loss and hits over ``streams``; with ``with_grads`` also the summed
    gradients of the mean loss by tensor name.
    """
    total = len(streams)
    loss_sum = 0.0
    hits = 0
    grads = {}
    for indices, ids, times, group_targets in _grouped_batches(streams, targets):
        logits, cache = model.forward(TokenBatch(times, model.embed(ids)), workers=workers, executor=executor)
        loss, grad_logits = cross_entropy(logits, group_targets)
        weight = len(indices) / total
        loss_sum += loss * weight
        hits += int(np.sum(np.argmax(logits, axis=1) == np.argmax(group_targets, axis=1)))
        if with_grads:
            group_grads, grad_U = model.backward(cache, grad_logits * weight, workers=workers, executor=executor)
            group_grads["embedding"] = model.embed_backward(ids, grad_U)
            for name, grad in group_grads.items():
                grads[name] = grads[name] + grad if name in grads else grad
    return loss_sum, hits, grads


def evaluate(model: StreamModel, dataset: EventDataset, batch, executor=None):
    """Mean loss and accuracy; batch chunks run on ``executor`` when given."""
    if len(dataset) == 0:
        return float("nan"), float("nan")
    targets = np.eye(dataset.classes)[dataset.labels]
    chunks = [range(start, min(start + batch, len(dataset))) for start in range(0, len(dataset), batch)]

    def run(chunk):
        loss, hits, _ = batch_loss(model, [dataset.streams[i] for i in chunk], targets[list(chunk)], with_grads=False)
        return loss * len(chunk), hits

    results = list(executor.map(run, chunks)) if executor is not None else [run(chunk) for chunk in chunks]
    loss = sum(r[0] for r in results) / len(dataset)
    accuracy = sum(r[1] for r in results) / len(dataset)
    return loss, accuracy


def format_metrics(epoch, split, loss, accuracy, wall_seconds):
    return f"epoch={epoch} split={split} loss={loss:.17g} accuracy={accuracy:.17g} wall_seconds={wall_seconds:.3f}"


def _write_dump(out_dir, step, loss, model, grads):
    path = os.path.join(out_dir, DUMP_FILE)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"step={step}\nloss={loss!r}\n")
        for name, array in model.tensors().items():
            grad = grads.get(name)
            grad_norm = float(np.linalg.norm(grad)) if grad is not None else float("nan")
            f.write(f"tensor={name} norm={float(np.linalg.norm(array))!r} grad_norm={grad_norm!r}\n")
    return path


def train_toy(model_config: ModelConfig, train_config: TrainConfig, train_set: EventDataset, val_set: EventDataset,
              out_dir, augment: EventAugmentConfig = None, workers=1, executor=None, model=None):
    """
    augment -> forward -> loss -> adjoint backward -> AdamW, one line per
    epoch and split in ``out_dir/metrics.txt``. Returns the trained model
    and the metric records.
    """
    augment = augment or EventAugmentConfig.disabled()
    if model_config.input != "events":
        raise ConfigurationError(f"toy training runs on event streams, model input is '{model_config.input}'")
    if model_config.classes != train_set.classes:
        raise ConfigurationError(f"model has {model_config.classes} classes, data has {train_set.classes}")
    os.makedirs(out_dir, exist_ok=True)

    model = model or StreamModel.init(model_config, make_rng(train_config.seed, "init"))
    params = model.tensors()
    state = AdamState()
    shuffle_rng = make_rng(train_config.seed, "shuffle")
    augment_rng = make_rng(train_config.seed, "augment")
    targets = np.eye(train_set.classes)[train_set.labels]

    records = []
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        for epoch in range(1, train_config.epochs + 1):
            started = time.perf_counter()
            order = shuffle_rng.permutation(len(train_set))
            loss_sum = 0.0
            hits = 0
            for start in range(0, len(order), train_config.batch):
                indices = order[start:start + train_config.batch]
                streams = [augment_events(train_set.streams[i], augment_rng, augment) for i in indices]
                batch_targets = targets[indices].copy()
                mix = augment_rng.random(len(indices)) < augment.cutmix_prob
                partners = augment_rng.permutation(len(indices))
                sources = list(streams)
                for row in np.flatnonzero(mix):
                    other = partners[row]
                    streams[row], batch_targets[row] = event_cutmix(
                        sources[row], batch_targets[row], sources[other], targets[indices[other]],
                        augment_rng, ratio=augment.cutmix_ratio)

                try:
                    loss, batch_hits, grads = batch_loss(model, streams, batch_targets,
                                                         workers=workers, executor=executor)
                except PropagationError as e:
                    dump = _write_dump(out_dir, state.step + 1, float("nan"), model, {})
                    raise TrainingDivergedError(f"non-finite values at epoch {epoch}: {e}", dump_path=dump)
                if not np.isfinite(loss):
                    dump = _write_dump(out_dir, state.step + 1, loss, model, grads)
                    raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}", dump_path=dump)
                adam_step(params, grads, state, train_config)
                loss_sum += loss * len(indices)
                hits += batch_hits

            wall = time.perf_counter() - started
            rows = [("train", loss_sum / len(train_set), hits / len(train_set))]
            if len(val_set):
                rows.append(("val",) + evaluate(model, val_set, train_config.batch, executor=executor))
            for split, loss, accuracy in rows:
                line = format_metrics(epoch, split, loss, accuracy, wall)
                metrics.write(line + "\n")
                metrics.flush()
                logger.info(line)
                records.append({"epoch": epoch, "split": split, "loss": loss, "accuracy": accuracy, "wall_seconds": wall})

    return model, records
