"""Minibatch SGD with momentum, step learning-rate schedules, training loop.

The update rule per non-frozen tensor is

    v <- momentum * v - rate * (grad + decay * w)
    w <- w + v

with the decay term skipped for biases and the whole update skipped for
frozen layers. Epoch shuffling and dropout draw from dedicated streams of the
run seed so the two never interact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as rngmod
from .errors import InputError, NumericError, ShapeError
from .nncore import Model, forward_logits, loss_and_grads, weight_layer_name
from .surgery import Checkpoint, Provenance


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant schedule: rate(i) = base / factor ** (i // every)."""
    base_rate: float = 0.01
    drop_factor: float = 10.0
    drop_every: int = 100_000

    def __post_init__(self):
        if self.base_rate <= 0:
            raise InputError(f"base rate must be positive, got {self.base_rate}")
        if self.drop_factor <= 1:
            raise InputError(f"drop factor must exceed 1, got {self.drop_factor}")
        if self.drop_every < 1:
            raise InputError(f"drop interval must be >= 1, got {self.drop_every}")


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    if iteration < 0:
        raise InputError(f"iteration must be >= 0, got {iteration}")
    try:
        divisor = schedule.drop_factor ** (iteration // schedule.drop_every)
    except OverflowError:
        return 0.0
    return schedule.base_rate / divisor


@dataclass(frozen=True)
class TrainConfig:
    """Defaults mirror the full-scale recipe; desk() is the fast profile."""
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0005
    total_iterations: int = 450_000
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise InputError(f"momentum must satisfy 0 <= m < 1, got {self.momentum}")
        if self.weight_decay < 0:
            raise InputError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.total_iterations < 0:
            raise InputError(f"iteration count must be >= 0, got {self.total_iterations}")

    @property
    def eval_every(self) -> int:
        return max(1, self.total_iterations // 20)

    @staticmethod
    def desk(seed: int = 0, total_iterations: int = 3000) -> "TrainConfig":
        return TrainConfig(batch_size=32, total_iterations=total_iterations,
                           schedule=LrSchedule(0.01, 10.0, 2000), seed=seed)


@dataclass
class OptimState:
    """Momentum velocities, keyed by spec layer index; frozen layers have none."""
    velocities: dict[int, tuple[np.ndarray, np.ndarray]]

    @staticmethod
    def for_model(model: Model) -> "OptimState":
        vel = {}
        for idx in model.spec.weight_layers():
            state = model.states[idx]
            if not state.frozen:
                vel[idx] = (np.zeros_like(state.weights), np.zeros_like(state.bias))
        return OptimState(vel)


def sgd_step(model: Model, grads: list, state: OptimState, config: TrainConfig,
             iteration: int) -> tuple[Model, OptimState]:
    """Apply one momentum update in place; frozen layers are untouched."""
    rate = lr_at(config.schedule, iteration)
    for pos, idx in enumerate(model.spec.weight_layers(), start=1):
        layer = model.states[idx]
        if layer.frozen:
            continue
        if grads[idx] is None:
            raise InputError(f"missing gradient for layer {weight_layer_name(model.spec, pos)}")
        dw, db = grads[idx]
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ShapeError(
                f"gradient shape mismatch in layer {weight_layer_name(model.spec, pos)}: "
                f"{dw.shape}/{db.shape} vs {layer.weights.shape}/{layer.bias.shape}")
        vw, vb = state.velocities[idx]
        np.multiply(vw, config.momentum, out=vw)
        vw -= (rate * (dw + config.weight_decay * layer.weights)).astype(vw.dtype, copy=False)
        layer.weights += vw
        np.multiply(vb, config.momentum, out=vb)
        vb -= (rate * db).astype(vb.dtype, copy=False)  # biases are exempt from decay
        layer.bias += vb
    return model, state


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    loss: float
    val_accuracy: Optional[float] = None


def model_accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
                   batch: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(images) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    hits = 0
    for start in range(0, len(images), batch):
        logits = forward_logits(model, images[start:start + batch], mode="eval")
        hits += int((logits.argmax(axis=1) == labels[start:start + batch]).sum())
    return hits / len(images)


def _check_dataset(model: Model, dataset) -> None:
    images = dataset.images
    if images.ndim != 4 or images.shape[1:] != model.spec.input_shape:
        raise ShapeError(
            f"dataset images {images.shape[1:] if images.ndim == 4 else images.shape} "
            f"do not match the model input {model.spec.input_shape}")
    if len(images) == 0:
        raise InputError("training dataset is empty")
    if int(dataset.labels.max()) >= model.spec.num_classes:
        raise ShapeError(
            f"dataset has label {int(dataset.labels.max())} but the model head "
            f"has {model.spec.num_classes} classes")


def train(model: Model, dataset, config: TrainConfig, val_dataset=None
          ) -> tuple[Checkpoint, list[TraceRow]]:
    """Train in place for config.total_iterations; snapshot a checkpoint.

    ``dataset`` (and ``val_dataset``) only need ``images``, ``labels`` and
    ``dataset_id`` attributes. The trace has one row per iteration; the
    validation cell is filled every ``config.eval_every`` iterations.
    """
    _check_dataset(model, dataset)
    shuffle_rng = rngmod.stream(rngmod.SHUFFLE, config.seed)
    dropout_rng = rngmod.stream(rngmod.DROPOUT, config.seed)
    state = OptimState.for_model(model)

    images, labels = dataset.images, dataset.labels
    n = len(images)
    batch = min(config.batch_size, n)
    per_epoch = n // batch

    # backprop below the lowest trainable layer is wasted work
    trainable = [i for i in model.spec.weight_layers() if not model.states[i].frozen]
    lowest_needed = min(trainable) if trainable else len(model.spec.layers)

    trace: list[TraceRow] = []
    order = None
    for it in range(config.total_iterations):
        slot = it % per_epoch
        if slot == 0:
            order = shuffle_rng.permutation(n)
        pick = order[slot * batch:(slot + 1) * batch]
        loss, grads, _ = loss_and_grads(model, images[pick], labels[pick],
                                        mode="train", rng=dropout_rng,
                                        lowest_needed=lowest_needed)
        if not np.isfinite(loss):
            norms = {weight_layer_name(model.spec, p): float(np.linalg.norm(s.weights))
                     for p, s in enumerate(model.weight_states(), start=1)}
            raise NumericError(
                f"non-finite training loss at iteration {it}; weight norms: {norms}",
                iteration=it, norms=norms)
        if trainable:
            sgd_step(model, grads, state, config, it)
        acc = None
        if val_dataset is not None and (it + 1) % config.eval_every == 0:
            acc = model_accuracy(model, val_dataset.images, val_dataset.labels)
        trace.append(TraceRow(it + 1, loss, acc))

    ckpt = Checkpoint.from_model(model, Provenance(
        dataset_id=getattr(dataset, "dataset_id", "unknown"),
        seed=config.seed, iterations=config.total_iterations))
    return ckpt, trace


def write_trace(path, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "val_accuracy"])
        for row in rows:
            writer.writerow([row.iteration, repr(row.loss),
                             "" if row.val_accuracy is None else repr(row.val_accuracy)])


def read_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            acc = rec["val_accuracy"]
            rows.append(TraceRow(int(rec["iteration"]), float(rec["loss"]),
                                 None if acc == "" else float(acc)))
    return rows
