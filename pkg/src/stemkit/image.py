"""Grayscale image primitives: filters, transforms, metrics, and 16-bit PNG I/O.

An image is a 2-D float64 numpy array in (height, width) layout with a nominal
value range of [0, 255]. Values may leave that range mid-pipeline; public
operations never introduce NaN or Inf. All functions are pure and safe to call
concurrently.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "as_image",
    "gaussian_kernel_1d",
    "gaussian_blur_2d",
    "gaussian_blur_rows",
    "gradient_magnitude",
    "fft2",
    "ifft2",
    "bicubic_upsample",
    "psnr",
    "ssim",
    "read_png",
    "write_png",
]


def as_image(data) -> np.ndarray:
    """Validate input as a 2-D finite float64 image array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image dimensions must be >= 1, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite samples")
    return img


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized Gaussian tap weights with radius ceil(3*sigma)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur_2d(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected boundaries.

    Reflection (edge-sample-repeating) padding keeps constants fixed and
    preserves the image mean exactly, so border statistics stay unbiased.
    """
    img = as_image(img)
    k = gaussian_kernel_1d(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def gaussian_blur_rows(img, sigma: float) -> np.ndarray:
    """1-D Gaussian blur applied independently to each row; columns never mix."""
    img = as_image(img)
    k = gaussian_kernel_1d(sigma)
    return ndimage.correlate1d(img, k, axis=1, mode="reflect")


def gradient_magnitude(img) -> np.ndarray:
    """Central-difference gradient magnitude; one-sided differences at borders."""
    img = as_image(img)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"gradient needs at least a 3x3 image, got {img.shape}")
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


def fft2(img) -> np.ndarray:
    """Forward 2-D DFT (unshifted, DC at [0, 0]); any size supported."""
    return np.fft.fft2(as_image(img))


def ifft2(spec) -> np.ndarray:
    """Inverse 2-D DFT; returns the real part as an image."""
    spec = np.asarray(spec, dtype=np.complex128)
    if spec.ndim != 2 or spec.shape[0] < 1 or spec.shape[1] < 1:
        raise ValueError(f"spectrum must be a non-empty 2-D grid, got shape {spec.shape}")
    return np.fft.ifft2(spec).real


def _catmull_rom_taps(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray]:
    """Source tap indices (clamped at the edges) and Catmull-Rom weights.

    Output sample x maps to source position x*(n_in-1)/(n_out-1), so the first
    and last samples align with the source corners and integer positions pass
    through source values exactly.
    """
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out, dtype=np.float64)
    else:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    base = np.floor(pos).astype(np.int64)
    t = pos - base
    idx = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, n_in - 1)
    t2 = t * t
    t3 = t2 * t
    w = np.stack(
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ],
        axis=1,
    )
    return idx, w


def bicubic_upsample(img, out_w: int, out_h: int) -> np.ndarray:
    """Catmull-Rom bicubic upsampling with edge clamping.

    Interpolates through the source samples: output positions that land on
    source grid points reproduce the source values exactly.
    """
    img = as_image(img)
    h, w = img.shape
    if out_w < w or out_h < h:
        raise ValueError(f"cannot shrink: source {w}x{h}, requested {out_w}x{out_h}")
    ix, wx = _catmull_rom_taps(out_w, w)
    iy, wy = _catmull_rom_taps(out_h, h)
    tmp = np.einsum("hwt,wt->hw", img[:, ix], wx)
    return np.einsum("hti,ht->hi", tmp[iy, :], wy)


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


_SSIM_RADIUS = 5  # 11x11 window
_SSIM_SIGMA = 1.5


def _ssim_window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant")
    r = _SSIM_RADIUS
    return out[r:-r, r:-r]


def ssim(a, b, data_range: float = 255.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    The map is averaged over valid windows only (no padded borders), matching
    the reference implementation of the metric.
    """
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < 2 * _SSIM_RADIUS + 1:
        raise ValueError(f"image too small for 11x11 windows: {a.shape}")
    x = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / _SSIM_SIGMA) ** 2)
    kernel /= kernel.sum()

    mu_a = _ssim_window_mean(a, kernel)
    mu_b = _ssim_window_mean(b, kernel)
    var_a = _ssim_window_mean(a * a, kernel) - mu_a * mu_a
    var_b = _ssim_window_mean(b * b, kernel) - mu_b * mu_b
    cov = _ssim_window_mean(a * b, kernel) - mu_a * mu_b

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def read_png(path) -> tuple[np.ndarray, int]:
    """Load a grayscale PNG; returns (image in [0, 255], source bit depth)."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr * (255.0 / 65535.0), 16
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64), 8
        raise ValueError(f"unsupported PNG mode {im.mode!r} for {path}")


def write_png(path, img) -> None:
    """Write a 16-bit grayscale PNG; [0, 255] maps linearly onto [0, 65535].

    Rounding is half-to-even; values outside [0, 255] are clipped.
    """
    img = as_image(img)
    scaled = np.clip(np.rint(img * (65535.0 / 255.0)), 0.0, 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(path, format="PNG")
