"""BN-scale channel pruning: ranking, planning, surgery, and reporting.

Channels are ranked network-wide by the magnitude of their BN scale; a prune
ratio marks the smallest fraction for removal against a single global
threshold. Two planning modes exist:

  normal   remove exactly the marked channels (with a one-survivor guard
           per layer),
  regular  round each layer's survivor count up to the next multiple of 8
           for hardware-friendly shapes, restoring the largest-magnitude
           victims; layers with fewer than 8 original channels keep them all.

Surgery physically deletes channels: the owning conv loses output rows, the
BN loses its per-channel entries, and the next conv (or the classifier head
behind global pooling) loses the matching input slice. Because activation
follows BN, a removed channel would have produced the constant
max(shift, 0) everywhere, so that constant, multiplied by the summed kernel
weights it fed, is folded into the downstream bias.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .graph import ModelGraph, count_flops, count_params
from .training import TrainConfig, train

__all__ = [
    "PruneError",
    "ScaleEntry",
    "PrunePlan",
    "CompressionReport",
    "collect_scales",
    "plan_prune",
    "apply_prune",
    "finetune",
    "compression_report",
    "write_plan",
    "format_ratio",
]


class PruneError(ValueError):
    """Invalid prune plan or plan/model mismatch."""


@dataclass(frozen=True)
class ScaleEntry:
    layer_index: int  # index of the BN layer within the model
    channel_index: int
    magnitude: float


@dataclass
class PrunePlan:
    method: str
    ratio: float
    threshold: float
    keep_masks: dict  # BN layer index -> bool array over its channels
    compensations: dict  # BN layer index -> {channel index -> folded constant}
    removed_count: int
    total_channels: int
    realized_fraction: float
    model_hash: str


def collect_scales(model: ModelGraph) -> list[ScaleEntry]:
    """One entry per BN channel, ascending by magnitude.

    Ties break by (layer index, channel index), i.e. declaration order.
    """
    bns = model.bn_layers()
    if not bns:
        raise PruneError("model has no batchnorm layers")
    entries = [
        ScaleEntry(i, c, float(abs(bn.scale[c])))
        for i, bn in bns
        for c in range(bn.channels)
    ]
    entries.sort(key=lambda e: (e.magnitude, e.layer_index, e.channel_index))
    return entries


def plan_prune(scales, ratio: float, method: str, model: ModelGraph) -> PrunePlan:
    """Build keep masks for the given global prune ratio.

    Marks the floor(ratio * total) smallest-magnitude channels, applies the
    one-survivor guard, then in regular mode rounds every layer's survivor
    count up to a multiple of 8 (all restorations pick the largest-magnitude
    victims in the layer). The recorded threshold is the magnitude of the
    largest channel the final plan removes.
    """
    if not 0 <= ratio < 1:
        raise PruneError(f"prune ratio must lie in [0, 1), got {ratio}")
    if method not in ("normal", "regular"):
        raise PruneError(f"unknown prune method {method!r}")
    scales = list(scales)
    if not scales:
        raise PruneError("empty scale list")

    bns = dict(model.bn_layers())
    total = len(scales)
    if total != sum(bn.channels for bn in bns.values()):
        raise PruneError("scale list does not cover the model's BN channels")

    n_mark = math.floor(ratio * total)
    removed = {}  # layer index -> {channel index -> magnitude}
    for entry in scales[:n_mark]:
        removed.setdefault(entry.layer_index, {})[entry.channel_index] = entry.magnitude

    def restore_largest(layer_idx: int, count: int) -> None:
        victims = sorted(removed[layer_idx].items(), key=lambda kv: kv[1], reverse=True)
        for channel, _ in victims[:count]:
            del removed[layer_idx][channel]

    # Guard: no layer may lose every channel.
    for layer_idx, bn in bns.items():
        marked = removed.get(layer_idx, {})
        if len(marked) >= bn.channels:
            restore_largest(layer_idx, len(marked) - bn.channels + 1)

    if method == "regular":
        for layer_idx, bn in bns.items():
            marked = removed.get(layer_idx, {})
            survivors = bn.channels - len(marked)
            if bn.channels < 8:
                target = bn.channels
            else:
                target = min(bn.channels, 8 * math.ceil(survivors / 8))
            if target > survivors:
                restore_largest(layer_idx, target - survivors)

    keep_masks = {}
    compensations = {}
    removed_count = 0
    threshold = 0.0
    for layer_idx, bn in bns.items():
        mask = np.ones(bn.channels, dtype=bool)
        comp = {}
        for channel, magnitude in sorted(removed.get(layer_idx, {}).items()):
            mask[channel] = False
            comp[channel] = float(max(bn.shift[channel], 0.0))
            threshold = max(threshold, magnitude)
            removed_count += 1
        keep_masks[layer_idx] = mask
        compensations[layer_idx] = comp

    return PrunePlan(
        method=method,
        ratio=float(ratio),
        threshold=threshold,
        keep_masks=keep_masks,
        compensations=compensations,
        removed_count=removed_count,
        total_channels=total,
        realized_fraction=removed_count / total,
        model_hash=model.content_hash(),
    )


def apply_prune(model: ModelGraph, plan: PrunePlan) -> ModelGraph:
    """Channel surgery: returns a new, smaller model; the input is untouched."""
    if plan.model_hash != model.content_hash():
        raise PruneError("plan/model hash mismatch: the plan was built against a different model")
    bn_indices = {i for i, _ in model.bn_layers()}
    if set(plan.keep_masks) != bn_indices:
        raise PruneError("plan does not cover the model's BN layers")
    for layer_idx, mask in plan.keep_masks.items():
        if not mask.any():
            raise PruneError(f"plan would empty BN layer {layer_idx}")

    dtype = model.dtype
    new_layers = []
    in_mask = np.ones(model.input_shape[0], dtype=bool)
    pending = {}  # original channel index of the current map -> folded constant

    for i, layer in enumerate(model.layers):
        if isinstance(layer, nn.Conv2d):
            params = layer.params
            next_is_pruned_bn = (i + 1) in plan.keep_masks
            out_mask = plan.keep_masks[i + 1] if next_is_pruned_bn else np.ones(
                params.out_channels, dtype=bool
            )
            if len(out_mask) != params.out_channels:
                raise PruneError(f"layer {i}: plan mask length does not match conv channels")
            bias = params.bias.astype(np.float64)
            for channel, const in pending.items():
                if const:
                    bias = bias + const * params.weights[:, channel, :, :].sum(axis=(1, 2)).astype(
                        np.float64
                    )
            weights = params.weights[np.ix_(out_mask, in_mask)]
            new_layers.append(
                nn.Conv2d(
                    nn.ConvParams(
                        np.ascontiguousarray(weights, dtype=dtype),
                        bias[out_mask].astype(dtype),
                        stride=params.stride,
                        padding=params.padding,
                    )
                )
            )
            in_mask = out_mask
            pending = {}
        elif isinstance(layer, nn.BatchNorm2d):
            p = layer.params
            mask = plan.keep_masks[i]
            new_layers.append(
                nn.BatchNorm2d(
                    nn.BNParams(
                        p.scale[mask].copy(),
                        p.shift[mask].copy(),
                        p.running_mean[mask].copy(),
                        p.running_var[mask].copy(),
                        eps=p.eps,
                        momentum=p.momentum,
                    )
                )
            )
            pending = dict(plan.compensations.get(i, {}))
        elif isinstance(layer, nn.Linear):
            bias = layer.bias.astype(np.float64)
            for channel, const in pending.items():
                if const:
                    bias = bias + const * layer.weights[:, channel].astype(np.float64)
            weights = layer.weights[:, in_mask]
            new_layers.append(
                nn.Linear(np.ascontiguousarray(weights, dtype=dtype), bias.astype(dtype))
            )
            in_mask = np.ones(layer.out_features, dtype=bool)
            pending = {}
        elif isinstance(layer, nn.ReLU):
            new_layers.append(nn.ReLU())
        elif isinstance(layer, nn.MaxPool2d):
            new_layers.append(nn.MaxPool2d(layer.size))
        elif isinstance(layer, nn.GlobalAvgPool):
            new_layers.append(nn.GlobalAvgPool())
        else:
            raise PruneError(f"layer {i}: cannot prune layer of type {type(layer).__name__}")

    return ModelGraph(new_layers, model.input_shape, model.class_count, version=model.version)


def finetune(model: ModelGraph, images, labels, config: TrainConfig):
    """Post-surgery recovery training: the train contract with the penalty off.

    Zero epochs is a no-op and returns the model unchanged.
    """
    if config.epochs == 0:
        return model, []
    return train(model, images, labels, dataclasses.replace(config, l1_coeff=0.0))


@dataclass
class CompressionReport:
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    bytes_before: int
    bytes_after: int
    ratio: float  # remaining-size fraction: bytes_after / bytes_before
    channel_table: list  # (BN layer index, channels before, channels after)


def format_ratio(ratio: float) -> str:
    """Remaining-size fraction formatted the way the report tables print it."""
    return f"{100.0 * ratio:.1f}%"


def compression_report(before: ModelGraph, before_path, after: ModelGraph, after_path) -> CompressionReport:
    bytes_before = os.path.getsize(before_path)
    bytes_after = os.path.getsize(after_path)
    table = [
        (i, bn_before.channels, bn_after.channels)
        for (i, bn_before), (_, bn_after) in zip(before.bn_layers(), after.bn_layers())
    ]
    return CompressionReport(
        params_before=count_params(before),
        params_after=count_params(after),
        flops_before=count_flops(before),
        flops_after=count_flops(after),
        bytes_before=bytes_before,
        bytes_after=bytes_after,
        ratio=bytes_after / bytes_before,
        channel_table=table,
    )


def write_plan(plan: PrunePlan, path) -> None:
    """Audit export: method, ratio, threshold, and per-layer keep masks."""
    lines = [
        f"method {plan.method}",
        f"ratio {plan.ratio:.6f}",
        f"threshold {plan.threshold:.8f}",
        f"removed {plan.removed_count}",
        f"total {plan.total_channels}",
        f"realized_fraction {plan.realized_fraction:.6f}",
        f"model_hash {plan.model_hash}",
    ]
    for layer_idx in sorted(plan.keep_masks):
        mask = plan.keep_masks[layer_idx]
        bits = " ".join("1" if keep else "0" for keep in mask)
        lines.append(f"layer {layer_idx} keep {bits}")
        comp = plan.compensations.get(layer_idx, {})
        if comp:
            consts = " ".join(f"{ch}:{const:.8f}" for ch, const in sorted(comp.items()))
            lines.append(f"layer {layer_idx} compensation {consts}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
