"""Evaluation bench: synthetic labeled datasets, accuracy, IoU/mAP, latency,
and on-disk model volume.

The synthetic generator stands in for a real aerial-photo corpus: each image
is one colored geometric shape (class = shape/color pair) over a textured
background, with a box annotation so the detection metrics have ground truth
to run against.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import read_ppm, write_ppm
from .graph import ModelGraph

__all__ = [
    "Box",
    "Split",
    "SyntheticDataset",
    "LatencyStats",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "load_box_file",
    "classify_accuracy",
    "iou",
    "mean_average_precision",
    "measure_latency",
    "model_volume",
    "thread_count",
]

SHAPES = ("square", "triangle", "circle")
COLORS = {"red": (0.85, 0.15, 0.15), "green": (0.15, 0.8, 0.2), "blue": (0.2, 0.25, 0.85)}


@dataclass
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int
    confidence: float | None = None

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        if self.confidence is not None and not 0 <= self.confidence <= 1:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass
class Split:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    boxes: list  # one ground-truth Box per image

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class SyntheticDataset:
    train: Split
    test: Split
    class_names: list
    image_size: int
    n_classes: int


def _shape_mask(kind: str, size: int, cy: float, cx: float, half: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if kind == "square":
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    if kind == "triangle":
        top = cy - half
        return (yy >= top) & (yy <= cy + half) & (np.abs(xx - cx) <= (yy - top) / 2.0)
    raise ValueError(f"unknown shape {kind!r}")


def _render_image(rng, size, class_id, class_names, object_scale):
    shape_name, color_name = class_names[class_id].split("-")
    base = rng.uniform(0.15, 0.4, 3)
    gradient = np.linspace(-0.05, 0.05, size)[:, None, None]
    noise = rng.normal(0.0, 0.03, (size, size, 3))
    img = np.clip(base + gradient + noise, 0.0, 0.6)

    half = 0.5 * size * rng.uniform(*object_scale)
    half = max(2.0, half)
    lo, hi = half + 1.0, size - half - 2.0
    cy = rng.uniform(lo, hi) if hi > lo else size / 2.0
    cx = rng.uniform(lo, hi) if hi > lo else size / 2.0
    mask = _shape_mask(shape_name, size, cy, cx, half)

    color = np.asarray(COLORS[color_name]) + rng.uniform(-0.05, 0.05, 3)
    img[mask] = np.clip(color + rng.normal(0.0, 0.02, 3), 0.0, 1.0)

    ys, xs = np.nonzero(mask)
    box = Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1), class_id)
    return img.astype(np.float32), box


def _make_split(rng, n, size, n_classes, class_names, object_scale) -> Split:
    labels = np.array([i % n_classes for i in range(n)], dtype=np.int64)
    rng.shuffle(labels)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    boxes = []
    for i in range(n):
        images[i], box = _render_image(rng, size, int(labels[i]), class_names, object_scale)
        boxes.append(box)
    return Split(images, labels, boxes)


def generate_dataset(
    seed: int,
    n_train: int,
    n_test: int,
    image_size: int = 24,
    n_classes: int = 6,
    object_scale=(0.35, 0.6),
    test_object_scale=None,
    test_exposure: float = 1.0,
) -> SyntheticDataset:
    """Class-balanced shape/color dataset, deterministic under seed.

    Two optional distribution shifts emulate capture-condition variation
    between collection runs: test_object_scale draws test-set object sizes
    from a different range, and test_exposure brightens (or darkens) the
    test images by a constant factor before clamping.
    """
    class_names = [f"{s}-{c}" for s in SHAPES for c in COLORS]
    if not 1 <= n_classes <= len(class_names):
        raise ValueError(f"n_classes must lie in [1, {len(class_names)}], got {n_classes}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    if n_train < n_classes or n_test < n_classes:
        raise ValueError("need at least one sample per class in each split")
    if not test_exposure > 0:
        raise ValueError(f"test_exposure must be > 0, got {test_exposure}")
    class_names = class_names[:n_classes]
    rng = np.random.default_rng(seed)
    train = _make_split(rng, n_train, image_size, n_classes, class_names, object_scale)
    test = _make_split(
        rng, n_test, image_size, n_classes, class_names, test_object_scale or object_scale
    )
    if test_exposure != 1.0:
        test.images = np.clip(test.images * np.float32(test_exposure), 0.0, 1.0)
    return SyntheticDataset(train, test, class_names, image_size, n_classes)


# ---------------------------------------------------------------------------
# Disk format: a directory per split holding PPM images plus one annotation
# text file with "image_id class x_min y_min x_max y_max" per line.
# ---------------------------------------------------------------------------


def _save_split(split: Split, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i in range(len(split)):
        stem = f"{i:05d}"
        write_ppm(split.images[i], os.path.join(directory, stem + ".ppm"))
        b = split.boxes[i]
        lines.append(f"{stem} {int(split.labels[i])} {b.x_min:.1f} {b.y_min:.1f} {b.x_max:.1f} {b.y_max:.1f}")
    with open(os.path.join(directory, "annotations.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_dataset(dataset: SyntheticDataset, root) -> None:
    _save_split(dataset.train, os.path.join(root, "train"))
    _save_split(dataset.test, os.path.join(root, "test"))


def _load_split(directory) -> Split:
    annotations = os.path.join(directory, "annotations.txt")
    images, labels, boxes = [], [], []
    with open(annotations, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            stem, class_id, x0, y0, x1, y1 = line.split()
            images.append(read_ppm(os.path.join(directory, stem + ".ppm")))
            labels.append(int(class_id))
            boxes.append(Box(float(x0), float(y0), float(x1), float(y1), int(class_id)))
    if not images:
        raise ValueError(f"{annotations}: no entries")
    return Split(np.stack(images), np.asarray(labels, dtype=np.int64), boxes)


def load_dataset(root):
    """Load (train, test) splits from a dataset directory."""
    return _load_split(os.path.join(root, "train")), _load_split(os.path.join(root, "test"))


def load_box_file(path, with_confidence: bool):
    """Read per-image box lists keyed by image id.

    Lines are "id class x0 y0 x1 y1" for ground truth or
    "id class confidence x0 y0 x1 y1" for predictions.
    """
    per_image: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if with_confidence:
                stem, cls, conf, x0, y0, x1, y1 = parts
                box = Box(float(x0), float(y0), float(x1), float(y1), int(cls), float(conf))
            else:
                stem, cls, x0, y0, x1, y1 = parts
                box = Box(float(x0), float(y0), float(x1), float(y1), int(cls))
            per_image.setdefault(stem, []).append(box)
    return per_image


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def classify_accuracy(model: ModelGraph, images: np.ndarray, labels, batch_size: int = 64) -> float:
    """Fraction of argmax-of-logits matches over the dataset, in eval mode."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    labels = np.asarray(labels)
    correct = 0
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        batch = np.ascontiguousarray(chunk.transpose(0, 3, 1, 2), dtype=model.dtype)
        logits = model.forward(batch, mode="eval")
        correct += int((logits.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return correct / len(images)


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0, 1]."""
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def average_precision(ranked_hits, n_gt: int) -> float:
    """Area under the monotone precision envelope of a ranked TP/FP list.

    ranked_hits is a confidence-descending list of booleans (True = matched
    a ground truth). Uses all-point interpolation.
    """
    if n_gt == 0 or not ranked_hits:
        return 0.0
    precisions = []
    recalls = []
    tp = 0
    for rank, hit in enumerate(ranked_hits, start=1):
        tp += int(hit)
        precisions.append(tp / rank)
        recalls.append(tp / n_gt)
    # monotone envelope: precision at recall r is the max precision at >= r
    envelope = list(precisions)
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for recall, env in zip(recalls, envelope):
        ap += (recall - prev_recall) * env
        prev_recall = recall
    return ap


def mean_average_precision(preds, gts, iou_threshold: float = 0.5):
    """mAP over the classes present in the ground truth.

    preds and gts are parallel per-image Box lists; predictions carry
    confidences. Per class, predictions are ranked by descending confidence
    (ties keep input order), each greedily matching the unmatched ground
    truth with the highest IoU at or above the threshold (ties resolve to
    the earliest box). Returns (mAP, {class_id: AP}).
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists vs {len(gts)} ground-truth lists")
    classes = sorted({b.class_id for image in gts for b in image})
    per_class = {}
    for cls in classes:
        entries = [
            (img_idx, box)
            for img_idx, boxes in enumerate(preds)
            for box in boxes
            if box.class_id == cls
        ]
        for _, box in entries:
            if box.confidence is None:
                raise ValueError("predictions need confidences")
        entries.sort(key=lambda e: -e[1].confidence)  # stable: input order breaks ties
        gt_by_image = [[b for b in boxes if b.class_id == cls] for boxes in gts]
        matched = [[False] * len(g) for g in gt_by_image]
        n_gt = sum(len(g) for g in gt_by_image)
        hits = []
        for img_idx, box in entries:
            best_iou, best_j = 0.0, None
            for j, gt_box in enumerate(gt_by_image[img_idx]):
                if matched[img_idx][j]:
                    continue
                overlap = iou(box, gt_box)
                if overlap >= iou_threshold and overlap > best_iou:
                    best_iou, best_j = overlap, j
            if best_j is not None:
                matched[img_idx][best_j] = True
                hits.append(True)
            else:
                hits.append(False)
        per_class[cls] = average_precision(hits, n_gt)
    if not per_class:
        return 0.0, {}
    return sum(per_class.values()) / len(per_class), per_class


# ---------------------------------------------------------------------------
# Latency and volume
# ---------------------------------------------------------------------------


def thread_count() -> int:
    """The declared compute thread count, from SLIMNET_THREADS."""
    value = os.environ.get("SLIMNET_THREADS")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


@dataclass
class LatencyStats:
    samples: list = field(repr=False)
    mean: float = 0.0
    std: float = 0.0
    warmup: int = 0
    threads: int = 1

    @classmethod
    def from_samples(cls, samples, warmup: int) -> "LatencyStats":
        arr = np.asarray(samples, dtype=np.float64)
        return cls(
            samples=list(arr),
            mean=float(arr.mean()),
            std=float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
            warmup=warmup,
            threads=thread_count(),
        )


def measure_latency(model: ModelGraph, input_shape=None, reps: int = 30, warmup: int = 5,
                    seed: int = 0) -> LatencyStats:
    """Monotonic-clock timing of single-image eval-mode forward passes."""
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    c, h, w = input_shape if input_shape is not None else model.input_shape
    x = np.random.default_rng(seed).standard_normal((1, c, h, w)).astype(model.dtype)
    for _ in range(warmup):
        model.forward(x, mode="eval")
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        model.forward(x, mode="eval")
        samples.append(time.perf_counter() - start)
    return LatencyStats.from_samples(samples, warmup)


def model_volume(path) -> int:
    """Exact on-disk byte size of a model file."""
    return os.path.getsize(path)
