"""Sequential CNN model graph: construction, validation, forward/backward, counters.

A model is an ordered chain of layers (conv / batchnorm / relu / maxpool /
globalavgpool / linear) with a declared input contract (channels, height,
width) and a class count. Convolutional stages are typically declared as
CBR blocks: convolution, then batch normalization, then relu.

Models are described by a plain text config, one layer per line:

    input 3 24 24
    classes 6
    cbr 3 12 3 1 1        # in out kernel stride padding (expands to conv+bn+relu)
    maxpool 2
    conv 12 24 3 1 1
    batchnorm 24
    relu
    globalavgpool
    linear 24 6
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

__all__ = [
    "GraphError",
    "LayerSpec",
    "ModelConfig",
    "ModelGraph",
    "parse_model_config",
    "load_model_config",
    "build_model",
    "count_params",
    "count_flops",
]

LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "globalavgpool", "linear")


class GraphError(ValueError):
    """Invalid model structure or incompatible input."""


@dataclass(frozen=True)
class LayerSpec:
    """One parsed layer declaration: a kind plus its integer extents."""

    kind: str
    args: tuple[int, ...] = ()


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int]  # (channels, height, width)
    class_count: int
    layers: tuple[LayerSpec, ...]


_ARG_COUNTS = {
    "conv": 5,  # in out kernel stride padding
    "batchnorm": 1,
    "relu": 0,
    "maxpool": 1,
    "globalavgpool": 0,
    "linear": 2,
    "cbr": 5,
}


def parse_model_config(text: str) -> ModelConfig:
    """Parse a model description; '#' starts a comment, blank lines ignored."""
    input_shape = None
    class_count = None
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key, args = parts[0], parts[1:]
        try:
            values = tuple(int(a) for a in args)
        except ValueError:
            raise GraphError(f"line {lineno}: non-integer argument in {line!r}") from None
        if key == "input":
            if len(values) != 3:
                raise GraphError(f"line {lineno}: input needs 3 extents, got {len(values)}")
            input_shape = values
        elif key == "classes":
            if len(values) != 1:
                raise GraphError(f"line {lineno}: classes needs 1 value")
            class_count = values[0]
        elif key in _ARG_COUNTS:
            if len(values) != _ARG_COUNTS[key]:
                raise GraphError(
                    f"line {lineno}: {key} needs {_ARG_COUNTS[key]} arguments, got {len(values)}"
                )
            if key == "cbr":
                cin, cout, k, stride, pad = values
                layers.append(LayerSpec("conv", (cin, cout, k, stride, pad)))
                layers.append(LayerSpec("batchnorm", (cout,)))
                layers.append(LayerSpec("relu"))
            else:
                layers.append(LayerSpec(key, values))
        else:
            raise GraphError(f"line {lineno}: unknown layer kind {key!r}")
    if input_shape is None:
        raise GraphError("model config must declare an input shape")
    if class_count is None:
        raise GraphError("model config must declare a class count")
    return ModelConfig(input_shape, class_count, tuple(layers))


def load_model_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_config(fh.read())


def _build_layer(spec: LayerSpec, rng: np.random.Generator, dtype):
    kind = spec.kind
    if kind == "conv":
        cin, cout, k, stride, pad = spec.args
        if min(cin, cout, k) < 1 or stride < 1 or pad < 0:
            raise GraphError(f"conv extents out of range: {spec.args}")
        std = np.sqrt(2.0 / (cin * k * k))
        weights = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        return nn.Conv2d(nn.ConvParams(weights, np.zeros(cout, dtype), stride=stride, padding=pad))
    if kind == "batchnorm":
        (channels,) = spec.args
        if channels < 1:
            raise GraphError(f"batchnorm needs >= 1 channels, got {channels}")
        return nn.BatchNorm2d(
            nn.BNParams(
                scale=np.full(channels, 0.5, dtype),
                shift=np.zeros(channels, dtype),
                running_mean=np.zeros(channels, dtype),
                running_var=np.ones(channels, dtype),
            )
        )
    if kind == "relu":
        return nn.ReLU()
    if kind == "maxpool":
        (size,) = spec.args
        if size < 1:
            raise GraphError(f"maxpool size must be >= 1, got {size}")
        return nn.MaxPool2d(size)
    if kind == "globalavgpool":
        return nn.GlobalAvgPool()
    if kind == "linear":
        fin, fout = spec.args
        if min(fin, fout) < 1:
            raise GraphError(f"linear extents out of range: {spec.args}")
        std = np.sqrt(2.0 / fin)
        weights = (rng.standard_normal((fout, fin)) * std).astype(dtype)
        return nn.Linear(weights, np.zeros(fout, dtype))
    raise GraphError(f"unknown layer kind {kind!r}")


class ModelGraph:
    """An immutable-by-convention chain of layers plus its input contract.

    The channel chain is validated at construction. Forward execution
    enforces the channel count strictly; spatial extents only need to be
    executable by every layer, so a model ending in global average pooling
    accepts any input size (multi-scale training relies on this). The
    declared height and width are the default evaluation size.
    """

    FORMAT_VERSION = 1

    def __init__(self, layers, input_shape, class_count, version: int | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.class_count = int(class_count)
        self.version = self.FORMAT_VERSION if version is None else int(version)
        self._validate()

    # -- structure -----------------------------------------------------

    def _validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise GraphError(f"bad input shape {self.input_shape}")
        if self.class_count < 1:
            raise GraphError(f"class count must be >= 1, got {self.class_count}")
        if not self.layers:
            raise GraphError("model has no layers")
        channels = self.input_shape[0]
        flat = None  # feature count once the map has been pooled to vectors
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (nn.Conv2d, nn.BatchNorm2d, nn.MaxPool2d, nn.GlobalAvgPool)):
                if flat is not None:
                    raise GraphError(f"layer {i}: spatial layer after features were flattened")
            if isinstance(layer, nn.Conv2d):
                if layer.in_channels != channels:
                    raise GraphError(
                        f"layer {i}: conv expects {layer.in_channels} input channels, chain has {channels}"
                    )
                channels = layer.out_channels
            elif isinstance(layer, nn.BatchNorm2d):
                if layer.channels != channels:
                    raise GraphError(
                        f"layer {i}: batchnorm over {layer.channels} channels, chain has {channels}"
                    )
            elif isinstance(layer, nn.GlobalAvgPool):
                flat = channels
            elif isinstance(layer, nn.Linear):
                if flat is None:
                    raise GraphError(f"layer {i}: linear before features were flattened")
                if layer.in_features != flat:
                    raise GraphError(
                        f"layer {i}: linear expects {layer.in_features} features, chain has {flat}"
                    )
                flat = layer.out_features
            elif isinstance(layer, nn.ReLU) and flat is not None:
                raise GraphError(f"layer {i}: relu on flattened features is not supported")
        if flat is None:
            raise GraphError("model must end in flattened features (globalavgpool + linear)")
        if flat != self.class_count:
            raise GraphError(f"model emits {flat} features but declares {self.class_count} classes")

    def bn_layers(self):
        """(layer index, BNParams) for every batch-normalization layer."""
        return [(i, l.params) for i, l in enumerate(self.layers) if isinstance(l, nn.BatchNorm2d)]

    @property
    def dtype(self):
        for layer in self.layers:
            arrays = layer.param_arrays()
            if arrays:
                return arrays[0].dtype
        return np.dtype(np.float32)

    # -- execution -----------------------------------------------------

    def forward(self, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise GraphError(f"unknown forward mode {mode!r}")
        if batch.ndim != 4:
            raise GraphError(f"batch must be NCHW, got shape {batch.shape}")
        if batch.shape[1] != self.input_shape[0]:
            raise GraphError(
                f"batch has {batch.shape[1]} channels, model expects {self.input_shape[0]}"
            )
        train = mode == "train"
        out = batch
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out, train=train)
            except ValueError as exc:
                raise GraphError(f"layer {i} ({layer.kind}): {exc}") from exc
        return out

    def backward(self, grad_logits: np.ndarray, l1_coeff: float = 0.0) -> np.ndarray:
        grad = grad_logits
        for layer in reversed(self.layers):
            grad = layer.backward(grad, l1_coeff=l1_coeff)
        return grad

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.param_arrays())
        return out

    def gradients(self):
        out = []
        for layer in self.layers:
            out.extend(layer.grad_arrays())
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    # -- copies ----------------------------------------------------------

    def copy(self) -> "ModelGraph":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "ModelGraph":
        """Deep copy with every parameter array cast to dtype."""
        layers = []
        for layer in self.layers:
            if isinstance(layer, nn.Conv2d):
                p = layer.params
                layers.append(
                    nn.Conv2d(
                        nn.ConvParams(
                            p.weights.astype(dtype), p.bias.astype(dtype), p.stride, p.padding
                        )
                    )
                )
            elif isinstance(layer, nn.BatchNorm2d):
                p = layer.params
                layers.append(
                    nn.BatchNorm2d(
                        nn.BNParams(
                            p.scale.astype(dtype),
                            p.shift.astype(dtype),
                            p.running_mean.astype(dtype),
                            p.running_var.astype(dtype),
                            eps=p.eps,
                            momentum=p.momentum,
                        )
                    )
                )
            elif isinstance(layer, nn.ReLU):
                layers.append(nn.ReLU())
            elif isinstance(layer, nn.MaxPool2d):
                layers.append(nn.MaxPool2d(layer.size))
            elif isinstance(layer, nn.GlobalAvgPool):
                layers.append(nn.GlobalAvgPool())
            elif isinstance(layer, nn.Linear):
                layers.append(nn.Linear(layer.weights.astype(dtype), layer.bias.astype(dtype)))
            else:
                raise GraphError(f"cannot copy layer of type {type(layer).__name__}")
        return ModelGraph(layers, self.input_shape, self.class_count, version=self.version)

    # -- serialization hooks (implemented in modelfile) -------------------

    def to_bytes(self) -> bytes:
        from . import modelfile

        return modelfile.model_to_bytes(self)

    def save(self, path) -> None:
        from . import modelfile

        modelfile.save_model(self, path)

    def content_hash(self) -> str:
        import hashlib

        return hashlib.sha256(self.to_bytes()).hexdigest()


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Construct and initialize a model from a parsed description.

    Conv and linear weights draw from a fan-in scaled normal distribution,
    biases start at zero, batch-norm scales at 0.5 and shifts at zero.
    """
    if not config.layers:
        raise GraphError("model config declares no layers")
    rng = np.random.default_rng(seed)
    layers = [_build_layer(spec, rng, dtype) for spec in config.layers]
    return ModelGraph(layers, config.input_shape, config.class_count)


def count_params(model: ModelGraph) -> int:
    """Number of stored real parameters, including BN running statistics."""
    total = 0
    for layer in model.layers:
        if isinstance(layer, nn.Conv2d):
            total += layer.params.weights.size + layer.params.bias.size
        elif isinstance(layer, nn.BatchNorm2d):
            total += 4 * layer.params.channels
        elif isinstance(layer, nn.Linear):
            total += layer.weights.size + layer.bias.size
    return int(total)


def count_flops(model: ModelGraph, input_shape=None) -> int:
    """Eval-mode floating operations for one sample under a fixed convention.

    conv: 2*in_ch*kh*kw*out_ch*H'*W' plus out_ch*H'*W' for the bias;
    batchnorm: 2 per element (one scale and one shift per element);
    relu: 1 per element; linear: 2*in*out + out;
    maxpool: (window - 1) comparisons per output element;
    globalavgpool: one add per input element.
    """
    if input_shape is None:
        input_shape = model.input_shape
    c, h, w = input_shape
    if c != model.input_shape[0]:
        raise GraphError(f"input shape has {c} channels, model expects {model.input_shape[0]}")
    total = 0
    for i, layer in enumerate(model.layers):
        if isinstance(layer, nn.Conv2d):
            p = layer.params
            kh, kw = p.kernel_size
            try:
                oh = nn._conv_out_extent(h, kh, p.stride, p.padding, "height")
                ow = nn._conv_out_extent(w, kw, p.stride, p.padding, "width")
            except ValueError as exc:
                raise GraphError(f"layer {i}: {exc}") from exc
            total += 2 * p.in_channels * kh * kw * p.out_channels * oh * ow
            total += p.out_channels * oh * ow
            c, h, w = p.out_channels, oh, ow
        elif isinstance(layer, nn.BatchNorm2d):
            total += 2 * c * h * w
        elif isinstance(layer, nn.ReLU):
            total += c * h * w
        elif isinstance(layer, nn.MaxPool2d):
            if h % layer.size or w % layer.size:
                raise GraphError(f"layer {i}: extents {h}x{w} not divisible by pool {layer.size}")
            h, w = h // layer.size, w // layer.size
            total += (layer.size * layer.size - 1) * c * h * w
        elif isinstance(layer, nn.GlobalAvgPool):
            total += c * h * w
            h = w = 1
        elif isinstance(layer, nn.Linear):
            total += 2 * layer.in_features * layer.out_features + layer.out_features
            c = layer.out_features
    return int(total)
