"""Command-line entry point for the whole pipeline.

Subcommands: train, sparse-train, prune, finetune, eval, bench, ablate,
augment-preview. Each run is driven by one INI-style config file; any value
can be overridden on the command line with repeated
``--set section.key=value`` flags. Reports are written as CSV plus a
companion PNG figure in the output directory.

Exit codes: 0 success, 1 validation error (bad config, missing paths),
2 runtime error.

The SLIMNET_THREADS environment variable pins the BLAS thread count; it is
applied before the numeric stack loads and recorded in latency reports.
"""

from __future__ import annotations

import os


def _pin_threads() -> None:
    value = os.environ.get("SLIMNET_THREADS")
    if value:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, value)


_pin_threads()

import argparse
import configparser
import csv
import sys

import numpy as np

from . import report
from .augment import AugmentConfig, METHOD_ORDER, make_pipeline, read_ppm, write_ppm
from .evalbench import (
    classify_accuracy,
    generate_dataset,
    load_box_file,
    load_dataset,
    mean_average_precision,
    measure_latency,
    model_volume,
    thread_count,
)
from .graph import GraphError, build_model, load_model_config
from .modelfile import ModelFileError, load_model, save_model
from .pruning import (
    PruneError,
    apply_prune,
    collect_scales,
    compression_report,
    finetune,
    format_ratio,
    plan_prune,
    write_plan,
)
from .training import TrainConfig, train, write_metrics_csv

PRUNE_CSV_HEADER = ["model", "prune_method", "prune_ratio", "model_volume_bytes", "compressing_ratio"]
BENCH_CSV_HEADER = [
    "model",
    "model_volume_bytes",
    "compressing_ratio",
    "mean_latency_s",
    "latency_std_s",
    "threads",
    "accuracy",
    "map",
]
ABLATE_CSV_HEADER = ["approach", "accuracy", "delta", "cumu_delta"]
EVAL_CSV_HEADER = ["model", "accuracy", "map"]


class ValidationError(Exception):
    """Bad configuration or missing input; maps to exit code 1."""


class RunConfig:
    """Layered key-value config: INI file values overridden by --set flags."""

    def __init__(self, path=None, overrides=()):
        self._parser = configparser.ConfigParser()
        if path is not None:
            if not os.path.isfile(path):
                raise ValidationError(f"config file not found: {path}")
            self._parser.read(path)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ValidationError(f"overrides look like section.key=value, got {item!r}")
            key, value = item.split("=", 1)
            section, option = key.split(".", 1)
            if not self._parser.has_section(section):
                self._parser.add_section(section)
            self._parser.set(section.strip(), option.strip(), value.strip())

    def get(self, section, key, default=None, required=False):
        if self._parser.has_option(section, key):
            return self._parser.get(section, key)
        if required:
            raise ValidationError(f"missing required config value [{section}] {key}")
        return default

    def get_int(self, section, key, default=None, required=False):
        raw = self.get(section, key, required=required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ValidationError(f"[{section}] {key} must be an integer, got {raw!r}") from None

    def get_float(self, section, key, default=None, required=False):
        raw = self.get(section, key, required=required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ValidationError(f"[{section}] {key} must be a number, got {raw!r}") from None

    def get_path(self, section, key, default=None, required=False, must_exist=True):
        raw = self.get(section, key, default=default, required=required)
        if raw is None:
            return None
        if must_exist and not os.path.exists(raw):
            raise ValidationError(f"[{section}] {key}: path does not exist: {raw}")
        return raw


def _out_dir(config: RunConfig, args) -> str:
    out = args.out or config.get("output", "dir", default="runs/out")
    os.makedirs(out, exist_ok=True)
    return out


def _load_dataset(config: RunConfig):
    """Resolve the [dataset] section to (train Split, test Split)."""
    kind = config.get("dataset", "kind", default="synthetic")
    if kind == "disk":
        path = config.get_path("dataset", "path", required=True)
        return load_dataset(path)
    if kind != "synthetic":
        raise ValidationError(f"[dataset] kind must be synthetic or disk, got {kind!r}")
    scale = (
        config.get_float("dataset", "object_scale_min", default=0.45),
        config.get_float("dataset", "object_scale_max", default=0.7),
    )
    test_scale = None
    if config.get("dataset", "test_object_scale_min") is not None:
        test_scale = (
            config.get_float("dataset", "test_object_scale_min"),
            config.get_float("dataset", "test_object_scale_max", required=True),
        )
    dataset = generate_dataset(
        seed=config.get_int("dataset", "seed", default=0),
        n_train=config.get_int("dataset", "n_train", default=240),
        n_test=config.get_int("dataset", "n_test", default=120),
        image_size=config.get_int("dataset", "image_size", default=24),
        n_classes=config.get_int("dataset", "classes", default=6),
        object_scale=scale,
        test_object_scale=test_scale,
        test_exposure=config.get_float("dataset", "test_exposure", default=1.0),
    )
    return dataset.train, dataset.test


def _build_model(config: RunConfig):
    path = config.get_path("model", "config", required=True)
    seed = config.get_int("model", "seed", default=0)
    return build_model(load_model_config(path), seed=seed)


def _train_config(config: RunConfig, default_l1: float) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=config.get_int("train", "epochs", default=10),
            batch_size=config.get_int("train", "batch_size", default=16),
            lr=config.get_float("train", "lr", default=0.1),
            momentum=config.get_float("train", "momentum", default=0.9),
            l1_coeff=config.get_float("train", "l1_coeff", default=default_l1),
            seed=config.get_int("train", "seed", default=0),
            lr_schedule=config.get("train", "lr_schedule", default="constant"),
            lr_step=config.get_int("train", "lr_step", default=0),
            lr_decay=config.get_float("train", "lr_decay", default=0.1),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _augment_config(config: RunConfig, methods=None) -> AugmentConfig:
    raw_scales = config.get("augment", "scale_set", default=None)
    scale_set = (
        tuple(int(s) for s in raw_scales.split()) if raw_scales else AugmentConfig().scale_set
    )
    raw_methods = methods
    if raw_methods is None:
        raw = config.get("augment", "methods", default=" ".join(METHOD_ORDER))
        raw_methods = tuple(raw.split())
    try:
        return AugmentConfig(
            exposure_factor=config.get_float("augment", "exposure_factor", default=1.5),
            saturation_factor=config.get_float("augment", "saturation_factor", default=1.5),
            hue_factor=config.get_float("augment", "hue_factor", default=0.1),
            angle_range_deg=config.get_float("augment", "angle_range", default=5.0),
            scale_set=scale_set,
            methods=raw_methods,
            seed=config.get_int("augment", "seed", default=0),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, config: RunConfig, sparse: bool) -> int:
    out = _out_dir(config, args)
    train_split, test_split = _load_dataset(config)
    model = _build_model(config)
    tc = _train_config(config, default_l1=1e-4 if sparse else 0.0)
    model, metrics = train(model, train_split.images, train_split.labels, tc)
    model_path = os.path.join(out, "model.slim")
    save_model(model, model_path)
    write_metrics_csv(metrics, os.path.join(out, "metrics.csv"))
    if metrics:
        report.save_training_curves(metrics, os.path.join(out, "training_curves.png"))
    report.save_scale_histogram(model, os.path.join(out, "scale_histogram.png"))
    test_acc = classify_accuracy(model, test_split.images, test_split.labels)
    print(f"model: {model_path}")
    print(f"test accuracy: {test_acc:.4f}  (l1_coeff={tc.l1_coeff})")
    return 0


def cmd_prune(args, config: RunConfig) -> int:
    out = _out_dir(config, args)
    model_path = args.model or config.get_path("prune", "model", required=True)
    if not os.path.isfile(model_path):
        raise ValidationError(f"model file not found: {model_path}")
    method = args.method or config.get("prune", "method", default="normal")
    if method not in ("normal", "regular"):
        raise ValidationError(f"prune method must be 'normal' or 'regular', got {method!r}")
    ratio = args.ratio if args.ratio is not None else config.get_float("prune", "ratio", default=0.3)
    if not 0 <= ratio < 1:
        raise ValidationError(f"prune ratio must lie in [0, 1), got {ratio}")

    model = load_model(model_path)
    plan = plan_prune(collect_scales(model), ratio, method, model)
    pruned = apply_prune(model, plan)
    pruned_path = os.path.join(out, "pruned.slim")
    save_model(pruned, pruned_path)
    write_plan(plan, os.path.join(out, "plan.txt"))
    comp = compression_report(model, model_path, pruned, pruned_path)
    _write_csv(
        os.path.join(out, "report.csv"),
        PRUNE_CSV_HEADER,
        [
            [
                os.path.basename(pruned_path),
                method,
                f"{ratio:g}",
                comp.bytes_after,
                format_ratio(comp.ratio),
            ]
        ],
    )
    report.save_channel_table(comp.channel_table, os.path.join(out, "channels.png"))
    print(f"pruned model: {pruned_path}")
    print(
        f"{method} prune at ratio {ratio:g}: removed {plan.removed_count}/{plan.total_channels} "
        f"channels, volume {comp.bytes_before} -> {comp.bytes_after} bytes "
        f"({format_ratio(comp.ratio)})"
    )
    return 0


def cmd_finetune(args, config: RunConfig) -> int:
    out = _out_dir(config, args)
    model_path = args.model or config.get_path("finetune", "model", required=True)
    if not os.path.isfile(model_path):
        raise ValidationError(f"model file not found: {model_path}")
    train_split, test_split = _load_dataset(config)
    model = load_model(model_path)
    tc = _train_config(config, default_l1=0.0)
    model, metrics = finetune(model, train_split.images, train_split.labels, tc)
    out_path = os.path.join(out, "finetuned.slim")
    save_model(model, out_path)
    write_metrics_csv(metrics, os.path.join(out, "metrics.csv"))
    if metrics:
        report.save_training_curves(metrics, os.path.join(out, "training_curves.png"))
    print(f"finetuned model: {out_path}")
    print(f"test accuracy: {classify_accuracy(model, test_split.images, test_split.labels):.4f}")
    return 0


def _maybe_map(config: RunConfig, section: str, predictions_path):
    """mAP from prediction/annotation box files when both are configured."""
    annotations_path = config.get_path(section, "annotations", default=None)
    if annotations_path is None or predictions_path is None:
        return None
    if not os.path.isfile(predictions_path):
        raise ValidationError(f"predictions file not found: {predictions_path}")
    gts = load_box_file(annotations_path, with_confidence=False)
    preds = load_box_file(predictions_path, with_confidence=True)
    ids = sorted(gts)
    value, _ = mean_average_precision([preds.get(i, []) for i in ids], [gts[i] for i in ids])
    return value


def cmd_eval(args, config: RunConfig) -> int:
    out = _out_dir(config, args)
    model_path = args.model or config.get_path("eval", "model", required=True)
    if not os.path.isfile(model_path):
        raise ValidationError(f"model file not found: {model_path}")
    _, test_split = _load_dataset(config)
    model = load_model(model_path)
    accuracy = classify_accuracy(model, test_split.images, test_split.labels)
    map_value = _maybe_map(config, "eval", config.get_path("eval", "predictions", default=None))
    _write_csv(
        os.path.join(out, "eval.csv"),
        EVAL_CSV_HEADER,
        [[os.path.basename(model_path), f"{accuracy:.4f}", "" if map_value is None else f"{map_value:.4f}"]],
    )
    print(f"accuracy: {accuracy:.4f}" + ("" if map_value is None else f"  mAP: {map_value:.4f}"))
    return 0


def _bench_model_list(config: RunConfig):
    raw = config.get("bench", "models", required=True)
    entries = []
    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValidationError(f"[bench] models lines are 'label path', got {line!r}")
        label, path = parts
        if not os.path.isfile(path):
            raise ValidationError(f"bench model file not found: {path}")
        entries.append((label, path))
    if not entries:
        raise ValidationError("[bench] models lists no models")
    return entries


def cmd_bench(args, config: RunConfig) -> int:
    out = _out_dir(config, args)
    entries = _bench_model_list(config)
    _, test_split = _load_dataset(config)
    reps = config.get_int("bench", "reps", default=30)
    warmup = config.get_int("bench", "warmup", default=5)
    baseline_bytes = model_volume(entries[0][1])
    rows = []
    chart_rows = []
    for label, path in entries:
        model = load_model(path)
        volume = model_volume(path)
        stats = measure_latency(model, reps=reps, warmup=warmup)
        accuracy = classify_accuracy(model, test_split.images, test_split.labels)
        predictions = config.get("bench", f"predictions_{label}", default=None)
        map_value = _maybe_map(config, "bench", predictions)
        rows.append(
            [
                label,
                volume,
                format_ratio(volume / baseline_bytes),
                f"{stats.mean:.6f}",
                f"{stats.std:.6f}",
                stats.threads,
                f"{accuracy:.4f}",
                "" if map_value is None else f"{map_value:.4f}",
            ]
        )
        chart_rows.append(
            {"model": label, "model_volume_bytes": volume, "mean_latency_s": stats.mean}
        )
        print(
            f"{label}: {volume} bytes ({format_ratio(volume / baseline_bytes)}), "
            f"{1e3 * stats.mean:.2f} ms/image, accuracy {accuracy:.4f}"
        )
    _write_csv(os.path.join(out, "bench.csv"), BENCH_CSV_HEADER, rows)
    report.save_bench_chart(chart_rows, os.path.join(out, "bench.png"))
    return 0


def cmd_ablate(args, config: RunConfig) -> int:
    out = _out_dir(config, args)
    raw_methods = config.get("ablate", "methods", default=" ".join(METHOD_ORDER)).split()
    if not raw_methods:
        raise ValidationError("[ablate] methods is empty")
    bad = set(raw_methods) - set(METHOD_ORDER)
    if bad:
        raise ValidationError(f"unknown ablate methods: {sorted(bad)}")
    methods = [m for m in METHOD_ORDER if m in raw_methods]
    train_split, test_split = _load_dataset(config)
    tc = _train_config(config, default_l1=0.0)

    def run(enabled) -> float:
        model = _build_model(config)
        augmenter = make_pipeline(_augment_config(config, methods=tuple(enabled))) if enabled else None
        train(model, train_split.images, train_split.labels, tc, augment=augmenter)
        return 100.0 * classify_accuracy(model, test_split.images, test_split.labels)

    baseline = run(())
    singles = {m: run((m,)) for m in methods}
    prefix_metrics = []
    for i in range(1, len(methods) + 1):
        if i == 1:
            prefix_metrics.append(singles[methods[0]])
        else:
            prefix_metrics.append(run(tuple(methods[:i])))
    cumulative = prefix_metrics[-1]

    rows = [["baseline", f"{baseline:.2f}", "0.00", "0.00"]]
    chart_rows = [{"approach": "baseline", "delta": 0.0}]
    for i, m in enumerate(methods):
        delta = singles[m] - baseline
        cumu = prefix_metrics[i] - baseline
        rows.append([m, f"{singles[m]:.2f}", f"{delta:+.2f}", f"{cumu:+.2f}"])
        chart_rows.append({"approach": m, "delta": delta})
    rows.append(
        ["cumulative", f"{cumulative:.2f}", f"{cumulative - baseline:+.2f}", f"{cumulative - baseline:+.2f}"]
    )
    chart_rows.append({"approach": "cumulative", "delta": cumulative - baseline})
    _write_csv(os.path.join(out, "ablation.csv"), ABLATE_CSV_HEADER, rows)
    report.save_ablation_chart(chart_rows, os.path.join(out, "ablation.png"))
    for row in rows:
        print(f"{row[0]:<12} accuracy={row[1]:>7}  delta={row[2]:>7}  cumulative={row[3]:>7}")
    return 0


def cmd_augment_preview(args, config: RunConfig) -> int:
    out = _out_dir(config, args)
    image_paths = list(args.images or [])
    raw = config.get("preview", "images", default=None)
    if raw:
        image_paths.extend(raw.split())
    if not image_paths:
        raise ValidationError("augment-preview needs input images (--images or [preview] images)")
    for path in image_paths:
        if not os.path.isfile(path):
            raise ValidationError(f"input image not found: {path}")
    base_config = _augment_config(config)
    methods = base_config.methods or METHOD_ORDER
    for index, path in enumerate(image_paths):
        image = read_ppm(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        for method in methods:
            single = _augment_config(config, methods=(method,))
            augmenter = make_pipeline(single)
            result = augmenter(image[None], batch_index=index)[0]
            out_path = os.path.join(out, f"{stem}_{method}.ppm")
            write_ppm(result, out_path)
            print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimnet",
        description="Sparsity training, BN-scale channel pruning, and benchmarking for compact CNNs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, **extra):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI run config")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config value; repeatable",
        )
        for flag, kw in extra.items():
            p.add_argument(flag, **kw)
        return p

    add("train", "train a model on the task loss")
    add("sparse-train", "train with the L1 penalty on BN scales")
    add("prune", "rank BN scales and perform channel surgery",
        **{"--model": dict(help="input model file"),
           "--method": dict(choices=["normal", "regular"], help="prune method"),
           "--ratio": dict(type=float, help="prune ratio in [0, 1)")})
    add("finetune", "recover accuracy after surgery", **{"--model": dict(help="input model file")})
    add("eval", "accuracy (and mAP from box files) of a model", **{"--model": dict(help="model file")})
    add("bench", "volume, latency, and accuracy over a set of models")
    add("ablate", "pre-processing ablation table")
    add("augment-preview", "write per-method transformed copies of input images",
        **{"--images": dict(nargs="*", help="input PPM images")})
    return parser


_COMMANDS = {
    "train": lambda a, c: cmd_train(a, c, sparse=False),
    "sparse-train": lambda a, c: cmd_train(a, c, sparse=True),
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "augment-preview": cmd_augment_preview,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = RunConfig(args.config, args.overrides)
        return _COMMANDS[args.command](args, config)
    except (ValidationError, PruneError, GraphError, ModelFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
