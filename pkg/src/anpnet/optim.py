"""SGD with momentum, weight decay, the step LR schedule, and the train loop.

Update rule, applied to every parameter tensor w with velocity v:

    v <- momentum * v - lr * (grad + weight_decay * w)
    w <- w + v

The learning rate is the base rate divided by 10 after every
``lr_drop_every`` iterations. Gradients are batch means, so the rate is
batch-size invariant. Weight decay applies to weights and biases alike.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import network
from .data import AnpVocabulary, ManifestRecord, make_batch
from .errors import DataError, NumericError, ParameterError, ShapeError
from .tensor import Rng

log = logging.getLogger(__name__)

LOG_LINE = "{iteration}\t{lr:.10g}\t{loss:.6f}"


@dataclass
class TrainConfig:
    base_lr: float
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_drop_every: int = 100_000
    lr_factor: float = 0.1
    max_iterations: int = 250_000
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.batch_size < 1 or self.lr_drop_every < 1:
            raise ParameterError("base_lr, batch_size and lr_drop_every must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise ParameterError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ParameterError("momentum and weight_decay must be non-negative")


@dataclass
class OptimizerState:
    """Velocity buffers mirroring the parameter map, plus the step counter."""

    velocity: dict
    iteration: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        velocity = {
            name: {part: np.zeros_like(arr) for part, arr in group.items()}
            for name, group in params.items()
        }
        return cls(velocity=velocity)


def lr_at(config: TrainConfig, iteration: int) -> float:
    if iteration < 0:
        raise ParameterError(f"iteration must be >= 0, got {iteration}")
    return config.base_lr * config.lr_factor ** (iteration // config.lr_drop_every)


def sgd_step(params: dict, grads: dict, state: OptimizerState,
             config: TrainConfig) -> None:
    """One in-place momentum update over every parameter tensor."""
    lr = lr_at(config, state.iteration)
    for name, group in params.items():
        for part, w in group.items():
            g = grads[name][part]
            v = state.velocity[name][part]
            if g.shape != w.shape or v.shape != w.shape:
                raise ShapeError(
                    f"{name}.{part}: param {w.shape}, grad {g.shape}, "
                    f"velocity {v.shape} disagree")
            v *= config.momentum
            v -= lr * (g + config.weight_decay * w)
            w += v
    state.iteration += 1


@dataclass
class TrainResult:
    model: network.NetworkModel
    log: list = field(default_factory=list)   # (iteration, lr, loss)
    skipped_images: int = 0
    last_snapshot: str | None = None


def train(model: network.NetworkModel, manifest, vocab: AnpVocabulary,
          config: TrainConfig, snapshot_dir=None, log_path=None,
          callback=None) -> TrainResult:
    """Iterate shuffled mini-batches of the manifest's train split.

    Each epoch reshuffles all train records with the seeded stream and
    runs floor(N / batch) iterations; the remainder rejoins the next
    shuffle. Snapshots go to ``snapshot_dir`` every ``snapshot_every``
    iterations. The loss log is deterministic for a fixed seed.
    """
    records = [r for r in manifest if r.split == "train"]
    if not records:
        raise DataError("no train records in manifest")
    root = Rng(config.seed)
    shuffle_rng = root.spawn(0)
    batch_root = root.spawn(1)
    dropout_root = root.spawn(2)
    state = OptimizerState.for_params(model.parameters())
    result = TrainResult(model=model)
    log_fh = open(log_path, "a") if log_path else None
    per_epoch = len(records) // config.batch_size
    order: list[ManifestRecord] = []
    try:
        while state.iteration < config.max_iterations:
            if not order:
                if per_epoch == 0:
                    raise DataError(
                        f"batch size {config.batch_size} exceeds dataset "
                        f"size {len(records)}")
                perm = shuffle_rng.permutation(len(records))
                order = [records[i] for i in perm[:per_epoch * config.batch_size]]
            chunk, order = order[:config.batch_size], order[config.batch_size:]
            iteration = state.iteration
            batch, labels = make_batch(
                chunk, vocab, "train", batch_root.spawn(iteration),
                means=model.channel_means)
            result.skipped_images += len(chunk) - len(labels)
            acts, _ = network.forward(
                model, batch, "train", dropout_root.spawn(iteration))
            grads, loss = network.backward(model, acts, labels)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss} at iteration {iteration}"
                    + (f"; last snapshot: {result.last_snapshot}"
                       if result.last_snapshot else ""))
            lr = lr_at(config, iteration)
            sgd_step(model.parameters(), grads, state, config)
            result.log.append((iteration, lr, loss))
            if log_fh:
                log_fh.write(LOG_LINE.format(iteration=iteration, lr=lr, loss=loss) + "\n")
            if callback is not None:
                callback(iteration, lr, loss)
            if (snapshot_dir and config.snapshot_every
                    and state.iteration % config.snapshot_every == 0):
                path = os.path.join(snapshot_dir, f"snapshot_iter{state.iteration}.dsbw")
                network.save_weights(model, path)
                result.last_snapshot = path
    finally:
        if log_fh:
            log_fh.close()
    if result.skipped_images:
        log.warning("skipped %d unreadable images during training",
                    result.skipped_images)
    return result
