"""Binary model file format: magic "SLIM", versioned layer table, CRC32 trailer.

Layout (all integers little-endian):

    magic          4 bytes, b"SLIM"
    version        u32
    in_channels    u32
    in_height      u32
    in_width       u32
    class_count    u32
    layer_count    u32
    layer table    one record per layer (see _write_layer_record)
    parameters     float32 arrays in declaration order:
                       conv: weights then bias
                       batchnorm: scale, shift, running_mean, running_var
                       linear: weights then bias
    crc32          u32 over every preceding byte

The format is byte-exact: save -> load -> save reproduces the file
identically, which is what lets prune plans pin a model by content hash.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np

from . import nn
from .graph import GraphError, ModelGraph

__all__ = [
    "ModelFileError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedModelError",
    "ChecksumError",
    "model_to_bytes",
    "model_from_bytes",
    "save_model",
    "load_model",
]

MAGIC = b"SLIM"
SUPPORTED_VERSIONS = (1,)

_KIND_CODES = {"conv": 1, "batchnorm": 2, "relu": 3, "maxpool": 4, "globalavgpool": 5, "linear": 6}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class ModelFileError(Exception):
    """Base error for unreadable model files."""


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class TruncatedModelError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


def _write_layer_record(buf: io.BytesIO, layer) -> None:
    buf.write(struct.pack("<B", _KIND_CODES[layer.kind]))
    if isinstance(layer, nn.Conv2d):
        p = layer.params
        kh, kw = p.kernel_size
        buf.write(struct.pack("<6I", p.in_channels, p.out_channels, kh, kw, p.stride, p.padding))
    elif isinstance(layer, nn.BatchNorm2d):
        p = layer.params
        buf.write(struct.pack("<I2f", p.channels, np.float32(p.eps), np.float32(p.momentum)))
    elif isinstance(layer, nn.MaxPool2d):
        buf.write(struct.pack("<I", layer.size))
    elif isinstance(layer, nn.Linear):
        buf.write(struct.pack("<2I", layer.in_features, layer.out_features))


def _param_arrays(layer):
    if isinstance(layer, nn.Conv2d):
        return [layer.params.weights, layer.params.bias]
    if isinstance(layer, nn.BatchNorm2d):
        p = layer.params
        return [p.scale, p.shift, p.running_mean, p.running_var]
    if isinstance(layer, nn.Linear):
        return [layer.weights, layer.bias]
    return []


def model_to_bytes(model: ModelGraph) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    c, h, w = model.input_shape
    buf.write(struct.pack("<6I", model.version, c, h, w, model.class_count, len(model.layers)))
    for layer in model.layers:
        _write_layer_record(buf, layer)
    for layer in model.layers:
        for arr in _param_arrays(layer):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedModelError(
                f"model file truncated while reading {what} "
                f"(needed {n} bytes at offset {self.pos}, have {len(self.data)})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _param_float_count(kind: str, rec) -> int:
    if kind == "conv":
        cin, cout, kh, kw, _, _ = rec
        return cout * cin * kh * kw + cout
    if kind == "batchnorm":
        return 4 * rec[0]
    if kind == "linear":
        fin, fout = rec
        return fout * fin + fout
    return 0


def model_from_bytes(data: bytes) -> ModelGraph:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise TruncatedModelError("model file truncated before version field")
    (version,) = struct.unpack("<I", data[4:8])
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(f"unsupported model format version {version}")

    # Parse the structural part first so truncation is reported as such
    # rather than as a checksum failure.
    rd = _Reader(data)
    rd.take(4, "magic")
    _, c, h, w, class_count, layer_count = rd.unpack("<6I", "header")

    records = []
    for i in range(layer_count):
        (code,) = rd.unpack("<B", f"layer {i} kind")
        kind = _CODE_KINDS.get(code)
        if kind is None:
            raise ModelFileError(f"layer {i}: unknown layer code {code}")
        if kind == "conv":
            records.append((kind, rd.unpack("<6I", f"layer {i} conv record")))
        elif kind == "batchnorm":
            records.append((kind, rd.unpack("<I2f", f"layer {i} batchnorm record")))
        elif kind == "maxpool":
            records.append((kind, rd.unpack("<I", f"layer {i} maxpool record")))
        elif kind == "linear":
            records.append((kind, rd.unpack("<2I", f"layer {i} linear record")))
        else:
            records.append((kind, ()))

    param_bytes = 4 * sum(_param_float_count(kind, rec) for kind, rec in records)
    expected_len = rd.pos + param_bytes + 4
    if len(data) < expected_len:
        raise TruncatedModelError(
            f"model file truncated: {len(data)} bytes, structure requires {expected_len}"
        )
    if len(data) > expected_len:
        raise ModelFileError(f"{len(data) - expected_len} unexpected trailing bytes in model file")

    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("model file checksum mismatch")

    def read_array(shape, what):
        n = int(np.prod(shape))
        raw = rd.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    layers = []
    for i, (kind, rec) in enumerate(records):
        if kind == "conv":
            cin, cout, kh, kw, stride, pad = rec
            weights = read_array((cout, cin, kh, kw), f"layer {i} conv weights")
            bias = read_array((cout,), f"layer {i} conv bias")
            layers.append(nn.Conv2d(nn.ConvParams(weights, bias, stride=stride, padding=pad)))
        elif kind == "batchnorm":
            channels, eps, momentum = rec
            scale = read_array((channels,), f"layer {i} bn scale")
            shift = read_array((channels,), f"layer {i} bn shift")
            mean = read_array((channels,), f"layer {i} bn running_mean")
            var = read_array((channels,), f"layer {i} bn running_var")
            layers.append(
                nn.BatchNorm2d(
                    nn.BNParams(scale, shift, mean, var, eps=float(eps), momentum=float(momentum))
                )
            )
        elif kind == "relu":
            layers.append(nn.ReLU())
        elif kind == "maxpool":
            layers.append(nn.MaxPool2d(rec[0]))
        elif kind == "globalavgpool":
            layers.append(nn.GlobalAvgPool())
        elif kind == "linear":
            fin, fout = rec
            weights = read_array((fout, fin), f"layer {i} linear weights")
            bias = read_array((fout,), f"layer {i} linear bias")
            layers.append(nn.Linear(weights, bias))
    try:
        return ModelGraph(layers, (c, h, w), class_count, version=version)
    except GraphError as exc:
        raise ModelFileError(f"model file holds an invalid graph: {exc}") from exc


def save_model(model: ModelGraph, path) -> None:
    data = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
