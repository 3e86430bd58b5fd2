"""PNG I/O, luma conversion, bicubic resampling and Y-channel metrics."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import correlate1d

Y_MIN, Y_MAX = 16 / 255, 235 / 255
_RANGES = {"rgb": (0.0, 1.0), "gray": (0.0, 1.0), "y": (Y_MIN, Y_MAX)}


@dataclass
class ImagePlane:
    """Float32 image, shape (h, w, c) with c in {1, 3}.

    ``colorspace`` is ``"rgb"``, ``"gray"`` or ``"y"`` (studio-swing
    luma in [16/255, 235/255]).  Data is clamped to that range on
    construction.
    """

    data: np.ndarray
    colorspace: str = "rgb"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be (h, w) or (h, w, 1|3), got {arr.shape}")
        if self.colorspace not in _RANGES:
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        if (self.colorspace == "rgb") != (arr.shape[2] == 3):
            raise ValueError(f"{self.colorspace} image cannot have {arr.shape[2]} channels")
        lo, hi = _RANGES[self.colorspace]
        self.data = np.clip(arr, lo, hi).astype(np.float32)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _pixels(img) -> np.ndarray:
    return img.data if isinstance(img, ImagePlane) else np.asarray(img)


# ------------------------------------------------------------------------ I/O

def load_png(path) -> ImagePlane:
    """Read an 8- or 16-bit gray/RGB PNG into [0, 1] floats."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise ValueError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 2:
        return ImagePlane(raw / peak, "gray")
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    return ImagePlane(raw[:, :, ::-1] / peak, "rgb")


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(_pixels(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img) -> np.ndarray:
    """Round-trip through 8-bit, as a saved PNG would."""
    return to_uint8(img).astype(np.float32) / 255.0


def save_png(img, path) -> None:
    px = to_uint8(img)
    if px.ndim == 3 and px.shape[2] == 3:
        px = px[:, :, ::-1]
    elif px.ndim == 3:
        px = px[:, :, 0]
    if not cv2.imwrite(str(path), np.ascontiguousarray(px)):
        raise OSError(f"cannot write image {path}")


# ----------------------------------------------------------------- colour

def rgb_to_ycbcr_y(img) -> ImagePlane:
    """BT.601 studio-swing luma of an RGB image in [0, 1]."""
    px = _pixels(img).astype(np.float64)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {px.shape}")
    y = (16.0 + px @ np.array([65.481, 128.553, 24.966])) / 255.0
    return ImagePlane(y, "y")


# ----------------------------------------------------------------- bicubic

def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    inner = (a + 2) * x3 - (a + 3) * x2 + 1
    outer = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, inner, np.where(x < 2, outer, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(in_len: int, out_len: int, scale: float) -> np.ndarray:
    """(out_len, in_len) interpolation matrix along one axis.

    Output sample i sits at input coordinate (i + 0.5) / scale - 0.5.
    When shrinking, the kernel is stretched by 1/scale (antialiasing);
    taps outside the image are clamped to the nearest edge sample.
    """
    shrink = scale < 1
    width = 4.0 / scale if shrink else 4.0
    centers = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(centers - width / 2).astype(int)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = centers[:, None] - idx
    w = scale * cubic(scale * dist) if shrink else cubic(dist)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, in_len - 1).ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


def resize_array(px: np.ndarray, out_h: int, out_w: int, scale_h: float, scale_w: float) -> np.ndarray:
    """Separable bicubic resampling of an (h, w[, c]) array, float64 result, unclamped."""
    px = np.asarray(px, dtype=np.float64)
    mh = resize_matrix(px.shape[0], out_h, scale_h)
    mw = resize_matrix(px.shape[1], out_w, scale_w)
    out = np.tensordot(mh, px, axes=(1, 0))
    out = np.tensordot(mw, out, axes=(1, 1)).swapaxes(0, 1)
    return out


def bicubic_resize(img, scale_num: int, scale_den: int = 1):
    """Resize by scale_num / scale_den; output extents are ceil(in * scale).

    Accepts an :class:`ImagePlane` (returned clamped, same colorspace) or
    a bare array (returned clamped to [0, 1]).
    """
    if scale_num <= 0 or scale_den <= 0:
        raise ValueError("scale must be positive")
    px = _pixels(img)
    h, w = px.shape[:2]
    out_h = -(-h * scale_num // scale_den)
    out_w = -(-w * scale_num // scale_den)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize of {h}x{w} by {scale_num}/{scale_den} is empty")
    s = scale_num / scale_den
    out = resize_array(px, out_h, out_w, s, s)
    if isinstance(img, ImagePlane):
        return ImagePlane(out, img.colorspace)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def modcrop(px: np.ndarray, scale: int) -> np.ndarray:
    h, w = px.shape[:2]
    return px[: h - h % scale, : w - w % scale]


# ----------------------------------------------------------------- metrics

def _luma(img) -> np.ndarray:
    px = _pixels(img)
    if px.ndim == 3:
        if px.shape[2] != 1:
            raise ValueError("metrics expect a single-channel Y image")
        px = px[:, :, 0]
    return px.astype(np.float64)


def _crop_pair(sr, hr, border: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = _luma(sr), _luma(hr)
    if a.shape != b.shape:
        raise ValueError(f"image extents differ: {a.shape} vs {b.shape}")
    if border:
        a = a[border:-border, border:-border]
        b = b[border:-border, border:-border]
    if a.size == 0:
        raise ValueError("border crop leaves no pixels")
    return a, b


def psnr_y(sr, hr, border_crop: int = 0) -> float:
    """10 log10(1 / MSE) on [0, 1] data; +inf for identical images."""
    a, b = _crop_pair(sr, hr, border_crop)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim_y(sr, hr, border_crop: int = 0, window: int = 11, sigma: float = 1.5,
           k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows, data range 1."""
    a, b = _crop_pair(sr, hr, border_crop)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    g = _gaussian(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def synthetic_scene(height: int = 64, width: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic RGB scene in [0, 1]: colour gradients, oriented
    gratings and a few hard-edged discs and bars.  Used where a natural
    image would be, e.g. for smoke training and demos."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((height, width, 3))
    for c in range(3):
        gx, gy = rng.uniform(-1, 1, 2)
        img[:, :, c] = 0.5 + 0.25 * (gx * xx / width + gy * yy / height)
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += 0.12 * wave[:, :, None] * rng.uniform(0.3, 1.0, 3)
    for _ in range(4):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(4, max(5.0, min(height, width) / 4))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = rng.uniform(0.05, 0.95, 3)
    for _ in range(2):
        x0 = int(rng.integers(0, width - 4))
        img[:, x0:x0 + int(rng.integers(2, 5))] = rng.uniform(0.05, 0.95, 3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)
