"""Training loops: plain task training and sparse training with an L1 penalty
on every batch-normalization scale, plus sparsity monitoring.

The sparse objective is task loss + l1_coeff * sum(|scale|) over all BN
channels. The penalty enters the backward pass as a per-channel subgradient
on the scales; nothing else is penalized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .graph import ModelGraph
from .nn import sgd_step, softmax_cross_entropy

__all__ = ["TrainConfig", "EpochMetrics", "train", "scale_histogram", "write_metrics_csv"]

METRICS_FIELDS = ("epoch", "task_loss", "penalty", "total_loss", "accuracy", "sum_abs_scale")


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    l1_coeff: float = 0.0
    seed: int = 0
    lr_schedule: str = "constant"  # "constant" | "step"
    lr_step: int = 0  # epochs between decays when lr_schedule == "step"
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (train-mode BN), got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (np.isfinite(self.l1_coeff) and self.l1_coeff >= 0):
            raise ValueError(f"l1_coeff must be finite and >= 0, got {self.l1_coeff}")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.lr_schedule == "step" and self.lr_step < 1:
            raise ValueError("step schedule needs lr_step >= 1")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "step":
            return self.lr * self.lr_decay ** (epoch // self.lr_step)
        return self.lr


@dataclass
class EpochMetrics:
    epoch: int
    task_loss: float
    penalty: float
    total_loss: float
    accuracy: float
    sum_abs_scale: float

    def as_row(self):
        return [
            self.epoch,
            f"{self.task_loss:.6f}",
            f"{self.penalty:.8f}",
            f"{self.total_loss:.6f}",
            f"{self.accuracy:.4f}",
            f"{self.sum_abs_scale:.6f}",
        ]


def _to_nchw(images: np.ndarray, dtype) -> np.ndarray:
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"images must be (N, H, W, 3), got shape {images.shape}")
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=dtype)


def sum_abs_scales(model: ModelGraph) -> float:
    total = 0.0
    for _, bn in model.bn_layers():
        total += float(np.abs(bn.scale).sum())
    return total


def _eval_accuracy(model: ModelGraph, images: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    correct = 0
    for start in range(0, len(images), batch_size):
        batch = _to_nchw(images[start : start + batch_size], model.dtype)
        logits = model.forward(batch, mode="eval")
        correct += int((logits.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return correct / len(images)


def train(model: ModelGraph, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
          augment=None):
    """Mini-batch SGD on softmax cross-entropy, in place on the model.

    images are (N, H, W, 3) floats in [0, 1]; labels are integer class ids.
    Data order is reshuffled every epoch from the run seed and the last
    partial batch is dropped (train-mode BN needs at least two samples).
    augment, when given, is called as augment(batch_images, batch_index) on
    the HWC image batch before it is fed to the network.

    Returns (model, per-epoch EpochMetrics list). Deterministic for a fixed
    config and seed.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if len(images) < config.batch_size:
        raise ValueError(
            f"dataset of {len(images)} samples is smaller than batch_size {config.batch_size}"
        )
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    velocities = None
    lam = config.l1_coeff
    metrics: list[EpochMetrics] = []
    steps_per_epoch = len(images) // config.batch_size

    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        lr = config.lr_at(epoch)
        task_losses = []
        for step in range(steps_per_epoch):
            pick = order[step * config.batch_size : (step + 1) * config.batch_size]
            batch_images = images[pick]
            if augment is not None:
                batch_images = augment(batch_images, epoch * steps_per_epoch + step)
            batch = _to_nchw(batch_images, model.dtype)
            logits = model.forward(batch, mode="train")
            task_loss, dlogits = softmax_cross_entropy(logits, labels[pick])
            if not np.isfinite(task_loss):
                raise ArithmeticError(
                    f"non-finite task loss at epoch {epoch} step {step}: {task_loss}"
                )
            model.zero_grads()
            model.backward(dlogits, l1_coeff=lam)
            velocities = sgd_step(params, model.gradients(), lr, config.momentum, velocities)
            task_losses.append(task_loss)
        penalty = lam * sum_abs_scales(model)
        task_mean = float(np.mean(task_losses))
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                task_loss=task_mean,
                penalty=penalty,
                total_loss=task_mean + penalty,
                accuracy=_eval_accuracy(model, images, labels, config.batch_size),
                sum_abs_scale=sum_abs_scales(model),
            )
        )
    return model, metrics


def scale_histogram(model: ModelGraph, bin_edges) -> np.ndarray:
    """Histogram of |scale| over all BN channels with half-open [lo, hi) bins.

    bin_edges must be increasing and must cover every value (np.inf is a
    valid last edge); the counts then always sum to the total BN channel
    count.
    """
    bns = model.bn_layers()
    if not bns:
        raise ValueError("model has no batchnorm layers")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError(f"bin edges must be increasing with >= 2 entries, got {bin_edges}")
    values = np.concatenate([np.abs(bn.scale) for _, bn in bns])
    if values.min() < edges[0] or values.max() >= edges[-1]:
        raise ValueError(
            f"scale magnitudes in [{values.min():.4g}, {values.max():.4g}] "
            f"fall outside the bin range [{edges[0]:.4g}, {edges[-1]:.4g})"
        )
    idx = np.digitize(values, edges) - 1  # right=False: [lo, hi)
    return np.bincount(idx, minlength=len(edges) - 1)


def write_metrics_csv(metrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_FIELDS)
        for m in metrics:
            writer.writerow(m.as_row())
