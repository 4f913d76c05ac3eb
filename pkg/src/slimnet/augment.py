"""Training-time image pre-processing: HSV adjustments, random rotation, and
multi-scale letterbox resizing, composable into one seeded pipeline.

Images are (H, W, 3) float arrays with values in [0, 1]. Every method keeps
its output clamped to that range. The composed pipeline applies the enabled
methods in a fixed order: shape, rotation, saturation, exposure, hue; the
geometric steps run first so color statistics are computed on final pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AugmentConfig",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "adjust_hsv",
    "random_rotate",
    "rotate",
    "letterbox",
    "random_shape_resize",
    "make_pipeline",
    "Augmenter",
    "read_ppm",
    "write_ppm",
]

DEFAULT_SCALE_SET = (320, 352, 384, 416, 448, 480, 512)
METHOD_ORDER = ("shape", "angle", "saturation", "exposure", "hue")


@dataclass
class AugmentConfig:
    exposure_factor: float = 1.5
    saturation_factor: float = 1.5
    hue_factor: float = 0.1
    angle_range_deg: float = 5.0
    scale_set: tuple = DEFAULT_SCALE_SET
    methods: tuple = METHOD_ORDER  # enabled methods, any subset of METHOD_ORDER
    seed: int = 0

    def __post_init__(self):
        for name in ("exposure_factor", "saturation_factor", "hue_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.angle_range_deg < 0:
            raise ValueError(f"angle_range_deg must be >= 0, got {self.angle_range_deg}")
        self.scale_set = tuple(int(s) for s in self.scale_set)
        if not self.scale_set or min(self.scale_set) < 1:
            raise ValueError(f"scale_set must be a nonempty set of positive sizes: {self.scale_set}")
        bad = set(self.methods) - set(METHOD_ORDER)
        if bad:
            raise ValueError(f"unknown augmentation methods: {sorted(bad)}")
        self.methods = tuple(m for m in METHOD_ORDER if m in self.methods)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got shape {img.shape}")
    return img


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV with H in [0, 1) cyclic and S, V in [0, 1]."""
    img = _check_image(img)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    delta = maxc - minc
    safe_delta = np.where(delta == 0, 1.0, delta)

    h = np.zeros_like(maxc)
    r_max = (maxc == r) & (delta > 0)
    g_max = (maxc == g) & (delta > 0) & ~r_max
    b_max = (delta > 0) & ~r_max & ~g_max
    h = np.where(r_max, ((g - b) / safe_delta) % 6.0, h)
    h = np.where(g_max, (b - r) / safe_delta + 2.0, h)
    h = np.where(b_max, (r - g) / safe_delta + 4.0, h)
    h = (h / 6.0) % 1.0

    s = np.where(maxc > 0, delta / np.where(maxc == 0, 1.0, maxc), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = _check_image(hsv)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    channels = [
        np.choose(sector, [v, q, p, p, t, v]),
        np.choose(sector, [t, v, v, q, p, p]),
        np.choose(sector, [p, p, t, v, v, q]),
    ]
    return np.stack(channels, axis=-1).astype(hsv.dtype)


def adjust_hsv(img: np.ndarray, component: str, factor: float) -> np.ndarray:
    """Multiply one HSV component by factor and convert back to RGB.

    exposure scales V, saturation scales S (both clamped to [0, 1]); hue
    scales H with wraparound modulo 1.
    """
    if not factor > 0:
        raise ValueError(f"factor must be > 0, got {factor}")
    img = _check_image(img)
    hsv = rgb_to_hsv(img.astype(np.float64))
    if component == "exposure":
        hsv[..., 2] = np.clip(hsv[..., 2] * factor, 0.0, 1.0)
    elif component == "saturation":
        hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0.0, 1.0)
    elif component == "hue":
        hsv[..., 0] = (hsv[..., 0] * factor) % 1.0
    else:
        raise ValueError(f"unknown HSV component {component!r}")
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0).astype(img.dtype)


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample img at fractional (ys, xs); coordinates outside the frame read black."""
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]

    def tap(yi, xi):
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside[..., None], vals, 0.0)

    top = tap(y0, x0) * (1 - fx) + tap(y0, x0 + 1) * fx
    bottom = tap(y0 + 1, x0) * (1 - fx) + tap(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bottom * fy


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counterclockwise about the image center; output extents match
    the input and uncovered corners are black."""
    img = _check_image(img)
    if angle_deg == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    src_y = cy + cos_t * dy + sin_t * dx
    src_x = cx - sin_t * dy + cos_t * dx
    out = _bilinear_sample(img.astype(np.float64), src_y, src_x)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def random_rotate(img: np.ndarray, angle_range_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate by an angle drawn uniformly from [-range, +range] degrees."""
    if angle_range_deg < 0:
        raise ValueError(f"angle range must be >= 0, got {angle_range_deg}")
    if angle_range_deg == 0:
        return _check_image(img).copy()
    angle = rng.uniform(-angle_range_deg, angle_range_deg)
    return rotate(img, angle)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (out_h, out_w) == (h, w):
        return img.copy()
    # half-pixel-center convention, identical to the common resize behavior
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    grid_y, grid_x = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return _bilinear_sample(img.astype(np.float64), grid_y, grid_x)


def letterbox(img: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving bilinear resize onto a black size x size canvas."""
    img = _check_image(img)
    if size < 1:
        raise ValueError(f"target size must be >= 1, got {size}")
    h, w = img.shape[:2]
    scale = min(size / h, size / w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    resized = _resize_bilinear(img, new_h, new_w)
    canvas = np.zeros((size, size, 3), dtype=np.float64)
    top = (size - new_h) // 2
    left = (size - new_w) // 2
    canvas[top : top + new_h, left : left + new_w] = resized
    return np.clip(canvas, 0.0, 1.0).astype(img.dtype)


def random_shape_resize(batch, scale_set, rng: np.random.Generator):
    """Letterbox a whole batch to one size drawn uniformly from scale_set."""
    sizes = sorted(set(int(s) for s in scale_set))
    if not sizes:
        raise ValueError("scale_set must be nonempty")
    target = int(sizes[rng.integers(0, len(sizes))])
    return np.stack([letterbox(img, target) for img in batch])


class Augmenter:
    """Applies the enabled methods to image batches, deterministically.

    The output is a pure function of (config, seed, input, batch_index):
    the size draw for the batch comes from a stream keyed by (seed,
    batch_index) and each image gets its own stream keyed by (seed,
    batch_index, position), so batches can be processed in any order or in
    parallel without changing the result.
    """

    def __init__(self, config: AugmentConfig):
        self.config = config

    def __call__(self, batch, batch_index: int = 0):
        cfg = self.config
        batch = np.asarray(batch)
        if batch.ndim != 4 or batch.shape[-1] != 3:
            raise ValueError(f"batch must be (N, H, W, 3), got shape {batch.shape}")
        images = batch
        if "shape" in cfg.methods:
            batch_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, batch_index)))
            images = random_shape_resize(images, cfg.scale_set, batch_rng)
        out = []
        for position, img in enumerate(images):
            img_rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, batch_index, position))
            )
            if "angle" in cfg.methods:
                img = random_rotate(img, cfg.angle_range_deg, img_rng)
            if "saturation" in cfg.methods:
                img = adjust_hsv(img, "saturation", cfg.saturation_factor)
            if "exposure" in cfg.methods:
                img = adjust_hsv(img, "exposure", cfg.exposure_factor)
            if "hue" in cfg.methods:
                img = adjust_hsv(img, "hue", cfg.hue_factor)
            out.append(img)
        return np.stack(out).astype(batch.dtype)


def make_pipeline(config: AugmentConfig) -> Augmenter:
    return Augmenter(config)


# ---------------------------------------------------------------------------
# Lossless raster I/O (binary portable pixmap, 8-bit).
# ---------------------------------------------------------------------------


def write_ppm(img: np.ndarray, path) -> None:
    img = _check_image(img)
    data = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    width, height, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    if pixels.size != width * height * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (pixels.reshape(height, width, 3).astype(np.float32)) / 255.0
