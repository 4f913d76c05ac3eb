"""Dense NCHW tensor kernels: primitive layers, SGD, and a gradient checker.

Feature maps are contiguous numpy arrays in NCHW layout. Models store their
parameters as float32; every kernel also runs in float64, which is the mode
the finite-difference gradient checker uses.

Convolution ships two kernels: an explicit-loop reference implementation and
a patch-matrix (im2col) implementation used everywhere else. The two must
agree within 1e-4 relative error in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvParams",
    "BNParams",
    "conv2d_forward",
    "conv2d_forward_reference",
    "conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu_forward",
    "relu_backward",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "global_avg_pool_forward",
    "global_avg_pool_backward",
    "linear_forward",
    "linear_backward",
    "softmax_cross_entropy",
    "sgd_step",
    "gradient_check",
    "Conv2d",
    "BatchNorm2d",
    "ReLU",
    "MaxPool2d",
    "GlobalAvgPool",
    "Linear",
]


@dataclass
class ConvParams:
    """Weights and geometry of one 2-d convolution.

    weights has shape (out_channels, in_channels, kernel_h, kernel_w) and
    bias has shape (out_channels,). Padding is symmetric zero padding.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights)
        self.bias = np.ascontiguousarray(self.bias)
        if self.weights.ndim != 4:
            raise ValueError(f"conv weights must be rank 4, got shape {self.weights.shape}")
        if min(self.weights.shape) < 1:
            raise ValueError(f"conv weight extents must be >= 1, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"conv bias shape {self.bias.shape} does not match out_channels {self.weights.shape[0]}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class BNParams:
    """Per-channel batch-normalization state.

    scale and shift are the learnable affine parameters; running_mean and
    running_var are the eval-mode statistics, updated in train mode by an
    exponential moving average with the given momentum. eps stabilizes the
    variance denominator and must be positive.
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        self.scale = np.ascontiguousarray(self.scale)
        self.shift = np.ascontiguousarray(self.shift)
        self.running_mean = np.ascontiguousarray(self.running_mean)
        self.running_var = np.ascontiguousarray(self.running_var)
        n = self.scale.shape
        for name, arr in (
            ("shift", self.shift),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ):
            if arr.shape != n:
                raise ValueError(f"BN {name} shape {arr.shape} does not match scale shape {n}")
        if self.scale.ndim != 1:
            raise ValueError(f"BN vectors must be rank 1, got shape {n}")
        if np.any(self.running_var < 0):
            raise ValueError("BN running_var must be >= 0 elementwise")
        if not self.eps > 0:
            raise ValueError(f"BN eps must be > 0, got {self.eps}")
        # Canonicalize to float32 precision so in-memory values always match
        # what the model file stores and reloads.
        self.eps = float(np.float32(self.eps))
        self.momentum = float(np.float32(self.momentum))

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


def _conv_out_extent(size: int, kernel: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ValueError(
            f"kernel {axis} extent {kernel} exceeds padded input extent {size + 2 * padding}"
        )
    if span % stride != 0:
        raise ValueError(
            f"non-integral output {axis} extent: ({size} + 2*{padding} - {kernel}) not divisible by stride {stride}"
        )
    return span // stride + 1


def _check_conv_input(x: np.ndarray, params: ConvParams) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ValueError(
            f"conv input has {x.shape[1]} channels, params expect {params.in_channels}"
        )
    kh, kw = params.kernel_size
    oh = _conv_out_extent(x.shape[2], kh, params.stride, params.padding, "height")
    ow = _conv_out_extent(x.shape[3], kw, params.stride, params.padding, "width")
    return oh, ow


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, oh: int, ow: int):
    n, c, h, w = x.shape
    if padding > 0:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    # (n, c, oh, ow, kh, kw) -> (n, oh*ow, c*kh*kw)
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * kh * kw)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int, oh: int, ow: int):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    blocks = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += blocks[
                :, :, :, :, i, j
            ]
    if padding > 0:
        return dxp[:, :, padding : padding + h, padding : padding + w]
    return dxp


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Zero-padded strided 2-d convolution via the patch-matrix kernel."""
    oh, ow = _check_conv_input(x, params)
    kh, kw = params.kernel_size
    cols = _im2col(x, kh, kw, params.stride, params.padding, oh, ow)
    wmat = params.weights.reshape(params.out_channels, -1)
    out = cols @ wmat.T + params.bias
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(x.shape[0], params.out_channels, oh, ow))


def conv2d_forward_reference(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Explicit-loop convolution used to validate the patch-matrix kernel.

    Accumulates each output value sequentially in float64 over the
    (in_channel, kernel_row, kernel_col) index order, then casts to the
    input dtype. Slow; intended for small test shapes only.
    """
    oh, ow = _check_conv_input(x, params)
    n, _, h, w = x.shape
    kh, kw = params.kernel_size
    stride, pad = params.stride, params.padding
    out = np.zeros((n, params.out_channels, oh, ow), dtype=x.dtype)
    for b in range(n):
        for oc in range(params.out_channels):
            for oy in range(oh):
                for ox in range(ow):
                    acc = float(params.bias[oc])
                    for ic in range(params.in_channels):
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - pad
                                if ix < 0 or ix >= w:
                                    continue
                                acc += float(x[b, ic, iy, ix]) * float(params.weights[oc, ic, ky, kx])
                    out[b, oc, oy, ox] = acc
    return out


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    oh, ow = _check_conv_input(x, params)
    n = x.shape[0]
    if grad_out.shape != (n, params.out_channels, oh, ow):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, params.out_channels, oh, ow)}"
        )
    kh, kw = params.kernel_size
    cols = _im2col(x, kh, kw, params.stride, params.padding, oh, ow)
    gmat = grad_out.reshape(n, params.out_channels, oh * ow)
    grad_bias = gmat.sum(axis=(0, 2))
    # (out, K) = sum_n (out, M) @ (M, K)
    grad_wmat = np.einsum("nom,nmk->ok", gmat, cols, optimize=True)
    grad_weights = grad_wmat.reshape(params.weights.shape)
    dcols = np.einsum("nom,ok->nmk", gmat, params.weights.reshape(params.out_channels, -1))
    grad_input = _col2im(dcols, x.shape, kh, kw, params.stride, params.padding, oh, ow)
    return grad_input, grad_weights, grad_bias


class _BNCache:
    __slots__ = ("x_hat", "inv_std", "scale", "reduce_count")

    def __init__(self, x_hat, inv_std, scale, reduce_count):
        self.x_hat = x_hat
        self.inv_std = inv_std
        self.scale = scale
        self.reduce_count = reduce_count


def batchnorm_forward(x: np.ndarray, bn: BNParams, mode: str = "train"):
    """Per-channel batch normalization over an NCHW map.

    Train mode normalizes with the current batch mean and biased variance
    and updates the running statistics; eval mode normalizes with the
    running statistics. Returns (output, cache); the cache is None in eval
    mode and feeds batchnorm_backward otherwise.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"batchnorm input must be NCHW, got shape {x.shape}")
    if x.shape[1] != bn.channels:
        raise ValueError(f"batchnorm input has {x.shape[1]} channels, params expect {bn.channels}")
    view = bn.scale.reshape(1, -1, 1, 1)
    shift = bn.shift.reshape(1, -1, 1, 1)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        x_hat = (x - bn.running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        return view * x_hat + shift, None

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ValueError(f"batchnorm train mode needs >= 2 values per channel, got {m}")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    x_hat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = view * x_hat + shift
    mom = bn.momentum
    bn.running_mean[...] = (1.0 - mom) * bn.running_mean + mom * mean
    bn.running_var[...] = (1.0 - mom) * bn.running_var + mom * var
    return out, _BNCache(x_hat, inv_std, bn.scale, m)


def batchnorm_backward(cache: _BNCache, grad_out: np.ndarray, l1_coeff: float = 0.0):
    """Train-mode batch-normalization gradients.

    grad_scale carries the task gradient plus l1_coeff * sign(scale), the
    subgradient of the sparsity penalty, with sign(0) taken as 0.
    """
    if cache is None:
        raise ValueError("batchnorm_backward needs a cache from a train-mode forward")
    if grad_out.shape != cache.x_hat.shape:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match cached activation {cache.x_hat.shape}"
        )
    if l1_coeff < 0:
        raise ValueError(f"l1_coeff must be >= 0, got {l1_coeff}")
    x_hat = cache.x_hat
    m = cache.reduce_count
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    grad_scale = (grad_out * x_hat).sum(axis=(0, 2, 3))
    dx_hat = grad_out * cache.scale.reshape(1, -1, 1, 1)
    sum_dx_hat = dx_hat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dx_hat_xhat = (dx_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
    grad_input = (cache.inv_std.reshape(1, -1, 1, 1) / m) * (
        m * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_xhat
    )
    if l1_coeff > 0:
        grad_scale = grad_scale + l1_coeff * np.sign(cache.scale)
    return grad_input, grad_scale, grad_shift


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ValueError(f"relu grad_out shape {grad_out.shape} does not match input {x.shape}")
    return grad_out * (x > 0)


def maxpool2d_forward(x: np.ndarray, size: int = 2):
    """Non-overlapping max pooling with window = stride = size.

    Spatial extents must be divisible by the window. Ties within a window
    resolve to the first entry in row-major order, so the backward pass is
    deterministic. Returns (output, cache).
    """
    if size < 1:
        raise ValueError(f"pool size must be >= 1, got {size}")
    if x.ndim != 4:
        raise ValueError(f"maxpool input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"maxpool input extents {h}x{w} not divisible by window {size}")
    oh, ow = h // size, w // size
    tiles = x.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    arg = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, size, arg)


def maxpool2d_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    x_shape, size, arg = cache
    n, c, h, w = x_shape
    oh, ow = h // size, w // size
    if grad_out.shape != (n, c, oh, ow):
        raise ValueError(f"maxpool grad_out shape {grad_out.shape} does not match {(n, c, oh, ow)}")
    tiles = np.zeros((n, c, oh, ow, size * size), dtype=grad_out.dtype)
    np.put_along_axis(tiles, arg[..., None], grad_out[..., None], axis=-1)
    return np.ascontiguousarray(
        tiles.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    )


def global_avg_pool_forward(x: np.ndarray):
    """Mean over the spatial axes: (N, C, H, W) -> (N, C). Returns (output, cache)."""
    if x.ndim != 4:
        raise ValueError(f"global average pool input must be NCHW, got shape {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = cache
    if grad_out.shape != (n, c):
        raise ValueError(f"pool grad_out shape {grad_out.shape} does not match {(n, c)}")
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), (n, c, h, w)).astype(
        grad_out.dtype, copy=True
    )


def linear_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map of (N, in) features with weights of shape (out, in)."""
    if x.ndim != 2:
        raise ValueError(f"linear input must be (N, features), got shape {x.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ValueError(f"linear input has {x.shape[1]} features, weights expect {weights.shape[1]}")
    return x @ weights.T + bias


def linear_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise ValueError(
            f"linear grad_out shape {grad_out.shape} does not match {(x.shape[0], weights.shape[0])}"
        )
    grad_weights = grad_out.T @ x
    grad_bias = grad_out.sum(axis=0)
    grad_input = grad_out @ weights
    return grad_input, grad_weights, grad_bias


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch of logits; returns (loss, grad_logits).

    For a single sample the logit gradient is softmax(logits) - one_hot(label);
    with mean reduction each sample's gradient is divided by the batch size.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, classes), got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype)


def sgd_step(params, grads, lr: float, momentum: float = 0.0, velocities=None):
    """One SGD step over aligned lists of arrays, updating params in place.

    With momentum m: v <- m*v + g, p <- p - lr*v. Returns the velocity list
    so callers can thread it through successive steps.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    if velocities is None:
        velocities = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape:
            raise ValueError(f"param shape {p.shape} does not match grad shape {g.shape}")
        if momentum > 0:
            v *= momentum
            v += g
            p -= lr * v
        else:
            p -= lr * g
    return velocities


# ---------------------------------------------------------------------------
# Layer objects: thin stateful wrappers over the kernels, used by the model
# graph and by the gradient checker.
# ---------------------------------------------------------------------------


class Conv2d:
    kind = "conv"

    def __init__(self, params: ConvParams):
        self.params = params
        self._x = None
        self.grad_weights = None
        self.grad_bias = None

    @property
    def in_channels(self) -> int:
        return self.params.in_channels

    @property
    def out_channels(self) -> int:
        return self.params.out_channels

    def forward(self, x, train=False):
        if train:
            self._x = x
        return conv2d_forward(x, self.params)

    def backward(self, grad_out, l1_coeff=0.0):
        grad_in, self.grad_weights, self.grad_bias = conv2d_backward(self._x, self.params, grad_out)
        return grad_in

    def param_arrays(self):
        return [self.params.weights, self.params.bias]

    def grad_arrays(self):
        return [self.grad_weights, self.grad_bias]

    def zero_grads(self):
        self.grad_weights = None
        self.grad_bias = None


class BatchNorm2d:
    kind = "batchnorm"

    def __init__(self, params: BNParams):
        self.params = params
        self._cache = None
        self.grad_scale = None
        self.grad_shift = None

    @property
    def channels(self) -> int:
        return self.params.channels

    def forward(self, x, train=False):
        out, self._cache = batchnorm_forward(x, self.params, "train" if train else "eval")
        return out

    def backward(self, grad_out, l1_coeff=0.0):
        grad_in, self.grad_scale, self.grad_shift = batchnorm_backward(
            self._cache, grad_out, l1_coeff
        )
        return grad_in

    def param_arrays(self):
        return [self.params.scale, self.params.shift]

    def grad_arrays(self):
        return [self.grad_scale, self.grad_shift]

    def zero_grads(self):
        self.grad_scale = None
        self.grad_shift = None


class ReLU:
    kind = "relu"

    def __init__(self):
        self._x = None

    def forward(self, x, train=False):
        if train:
            self._x = x
        return relu_forward(x)

    def backward(self, grad_out, l1_coeff=0.0):
        return relu_backward(self._x, grad_out)

    def param_arrays(self):
        return []

    def grad_arrays(self):
        return []

    def zero_grads(self):
        pass


class MaxPool2d:
    kind = "maxpool"

    def __init__(self, size: int = 2):
        if size < 1:
            raise ValueError(f"pool size must be >= 1, got {size}")
        self.size = size
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = maxpool2d_forward(x, self.size)
        return out

    def backward(self, grad_out, l1_coeff=0.0):
        return maxpool2d_backward(self._cache, grad_out)

    def param_arrays(self):
        return []

    def grad_arrays(self):
        return []

    def zero_grads(self):
        pass


class GlobalAvgPool:
    kind = "globalavgpool"

    def __init__(self):
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = global_avg_pool_forward(x)
        return out

    def backward(self, grad_out, l1_coeff=0.0):
        return global_avg_pool_backward(self._cache, grad_out)

    def param_arrays(self):
        return []

    def grad_arrays(self):
        return []

    def zero_grads(self):
        pass


class Linear:
    kind = "linear"

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        weights = np.ascontiguousarray(weights)
        bias = np.ascontiguousarray(bias)
        if weights.ndim != 2:
            raise ValueError(f"linear weights must be rank 2, got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} does not match {weights.shape[0]}")
        self.weights = weights
        self.bias = bias
        self._x = None
        self.grad_weights = None
        self.grad_bias = None

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def forward(self, x, train=False):
        if train:
            self._x = x
        return linear_forward(x, self.weights, self.bias)

    def backward(self, grad_out, l1_coeff=0.0):
        grad_in, self.grad_weights, self.grad_bias = linear_backward(self._x, self.weights, grad_out)
        return grad_in

    def param_arrays(self):
        return [self.weights, self.bias]

    def grad_arrays(self):
        return [self.grad_weights, self.grad_bias]

    def zero_grads(self):
        self.grad_weights = None
        self.grad_bias = None


def gradient_check(layer, x: np.ndarray, step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs the layer in train mode on a float64 copy of x, backpropagates a
    fixed random projection, then perturbs every input and parameter entry
    by +-step. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = layer.forward(x, train=True)
    projection = rng.standard_normal(out.shape)
    layer.zero_grads()
    grad_input = layer.backward(projection)

    def loss() -> float:
        return float(np.sum(layer.forward(x, train=True) * projection))

    worst = 0.0
    pairs = [(x, grad_input)] + list(zip(layer.param_arrays(), layer.grad_arrays()))
    for arr, analytic in pairs:
        numeric = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            original = arr[idx]
            arr[idx] = original + step
            hi = loss()
            arr[idx] = original - step
            lo = loss()
            arr[idx] = original
            numeric[idx] = (hi - lo) / (2.0 * step)
            it.iternext()
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
