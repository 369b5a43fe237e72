"""Forward noise model: background, row-coherent scan, and pointwise noise.

A noisy frame is composed as

    noisy = clean + background + scan + pointwise

where `clean` is the rendered atom signal (no background), `background` is a
smooth value-noise field, `scan` is row-coherent noise whose local standard
deviation follows the image gradient, and `pointwise` is pixel-independent
Tukey-lambda noise whose standard deviation follows the local brightness.
Parameters mirror the calibration output so synthesized frames can be
calibrated back to their generating profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import as_image, bicubic_upsample, gradient_magnitude, _catmull_rom_taps

HAADF = "haadf"
BF = "bf"
MODES = (HAADF, BF)

PROFILE_FIELDS = (
    "b_atom",
    "bg_min",
    "bg_max",
    "scan_k",
    "scan_b",
    "pw_k",
    "pw_b",
    "pw_lambda",
)

_EPS_P = 2.0 ** -53  # keep inverse-transform arguments strictly inside (0, 1)


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass(frozen=True)
class ScanNoiseParams:
    """Slope and intercept of the scan-noise std vs gradient magnitude."""

    k: float
    b: float

    def validate(self) -> "ScanNoiseParams":
        if not (math.isfinite(self.k) and math.isfinite(self.b)):
            raise ValueError("scan params must be finite")
        if self.b < 0:
            raise ValueError(f"scan intercept must be >= 0, got {self.b}")
        return self


@dataclass(frozen=True)
class PointwiseParams:
    """Brightness-dependent std (k*v + b) and Tukey-lambda shape."""

    k: float
    b: float
    lam: float

    def validate(self) -> "PointwiseParams":
        if not all(map(math.isfinite, (self.k, self.b, self.lam))):
            raise ValueError("pointwise params must be finite")
        if not (-0.5 <= self.lam <= 1.0):
            raise ValueError(f"lambda must lie in [-0.5, 1.0], got {self.lam}")
        # std must stay non-negative over the nominal brightness range
        if self.b < 0 or self.k * 255.0 + self.b < 0:
            raise ValueError(f"pointwise std k*v+b dips below 0 on [0, 255]: k={self.k}, b={self.b}")
        return self


@dataclass(frozen=True)
class BackgroundParams:
    """Brightness bounds and coarse-grid spacing of the background field."""

    b_min: float
    b_max: float
    lattice: int = 48

    def validate(self) -> "BackgroundParams":
        if not (0.0 <= self.b_min <= self.b_max <= 255.0):
            raise ValueError(f"background bounds must satisfy 0 <= min <= max <= 255, got [{self.b_min}, {self.b_max}]")
        if self.lattice < 2:
            raise ValueError(f"background lattice must be >= 2, got {self.lattice}")
        return self


@dataclass(frozen=True)
class NoiseProfile:
    """The nine calibrated parameters of one frame (plus imaging mode)."""

    b_atom: float
    background: BackgroundParams
    scan: ScanNoiseParams
    pointwise: PointwiseParams
    mode: str = HAADF

    def validate(self) -> "NoiseProfile":
        if not self.b_atom > 0:
            raise ValueError(f"b_atom must be positive, got {self.b_atom}")
        self.background.validate()
        self.scan.validate()
        self.pointwise.validate()
        check_mode(self.mode)
        return self

    def to_dict(self) -> dict:
        return {
            "b_atom": self.b_atom,
            "bg_min": self.background.b_min,
            "bg_max": self.background.b_max,
            "scan_k": self.scan.k,
            "scan_b": self.scan.b,
            "pw_k": self.pointwise.k,
            "pw_b": self.pointwise.b,
            "pw_lambda": self.pointwise.lam,
            "mode": self.mode,
            "bg_lattice": self.background.lattice,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseProfile":
        return cls(
            b_atom=float(d["b_atom"]),
            background=BackgroundParams(
                float(d["bg_min"]), float(d["bg_max"]), int(d.get("bg_lattice", 48))
            ),
            scan=ScanNoiseParams(float(d["scan_k"]), float(d["scan_b"])),
            pointwise=PointwiseParams(float(d["pw_k"]), float(d["pw_b"]), float(d["pw_lambda"])),
            mode=str(d.get("mode", HAADF)),
        )


def tukey_quantile(p, lam: float):
    """Quantile function of the unit Tukey-lambda distribution.

    (p^lam - (1-p)^lam) / lam for lam != 0; the logistic limit ln(p/(1-p))
    is used below |lam| = 1e-9.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("quantile argument must lie strictly inside (0, 1)")
    if abs(lam) < 1e-9:
        out = np.log(p / (1.0 - p))
    else:
        out = (np.power(p, lam) - np.power(1.0 - p, lam)) / lam
    return out if out.ndim else float(out)


def tukey_unit_std(lam: float) -> float:
    """Standard deviation of the unit Tukey-lambda distribution.

    Closed-form second moment 2/lam^2 * (1/(2*lam+1) - Gamma(lam+1)^2 /
    Gamma(2*lam+2)); finite only for lam > -0.5. The logistic value
    pi/sqrt(3) is substituted below |lam| = 1e-6, where the closed form
    loses precision to cancellation.
    """
    if not math.isfinite(lam):
        raise ValueError("lambda must be finite")
    if lam <= -0.5:
        raise ValueError(f"variance is infinite for lambda <= -0.5, got {lam}")
    if abs(lam) < 1e-6:
        return math.pi / math.sqrt(3.0)
    second = (2.0 / lam**2) * (
        1.0 / (2.0 * lam + 1.0) - math.exp(2.0 * math.lgamma(lam + 1.0) - math.lgamma(2.0 * lam + 2.0))
    )
    return math.sqrt(second)


def sample_tukey(rng: np.random.Generator, sigma: float, lam: float, n: int) -> np.ndarray:
    """n inverse-transform samples with standard deviation `sigma` and shape `lam`."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    scale = sigma / tukey_unit_std(lam)
    u = np.clip(rng.random(n), _EPS_P, 1.0 - _EPS_P)
    return tukey_quantile(u, lam) * scale


def _tukey_field(rng: np.random.Generator, shape, lam: float) -> np.ndarray:
    """Unit-std Tukey-lambda field of the given shape."""
    u = np.clip(rng.random(shape), _EPS_P, 1.0 - _EPS_P)
    return tukey_quantile(u, lam) / tukey_unit_std(lam)


def value_noise_2d(rng: np.random.Generator, out_w: int, out_h: int, lattice: int) -> np.ndarray:
    """Smooth random field in [0, 1]: uniform coarse grid, bicubically upsampled.

    The coarse grid has ceil(out/lattice)+3 points per axis; the upsampled
    field is cropped one cell in from the border so edge clamping never shows,
    then clamped to [0, 1] (Catmull-Rom may overshoot slightly).
    """
    if lattice < 2:
        raise ValueError(f"lattice must be >= 2, got {lattice}")
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    gw = math.ceil(out_w / lattice) + 3
    gh = math.ceil(out_h / lattice) + 3
    grid = rng.random((gh, gw))
    up = bicubic_upsample(grid, (gw - 1) * lattice + 1, (gh - 1) * lattice + 1)
    field = up[lattice : lattice + out_h, lattice : lattice + out_w]
    return np.clip(field, 0.0, 1.0)


def gen_background(rng: np.random.Generator, params: BackgroundParams, w: int, h: int) -> np.ndarray:
    """Smooth background field spanning [b_min, b_max]."""
    params.validate()
    field = value_noise_2d(rng, w, h, params.lattice)
    return params.b_min + field * (params.b_max - params.b_min)


def _value_noise_rows(rng: np.random.Generator, n_rows: int, width: int, lattice: int) -> np.ndarray:
    """Independent 1-D value-noise signal per row, raw [0, 1] range."""
    gw = math.ceil(width / lattice) + 3
    grid = rng.random((n_rows, gw))
    idx, wts = _catmull_rom_taps((gw - 1) * lattice + 1, gw)
    up = np.einsum("hwt,wt->hw", grid[:, idx], wts)
    return up[:, lattice : lattice + width]


def _unit_rows(signal: np.ndarray) -> np.ndarray:
    """Center and scale each row to zero mean, unit std (flat rows stay zero)."""
    out = signal - signal.mean(axis=1, keepdims=True)
    sd = out.std(axis=1, keepdims=True)
    np.divide(out, sd, out=out, where=sd > 1e-12)
    out[np.broadcast_to(sd <= 1e-12, out.shape)] = 0.0
    return out

# Octave lattices for the row-noise texture. Coarse+fine mirrors real scan
# jitter (slow drift plus fast flutter); the combined signal is renormalized
# per row so k and b carry all amplitude information.
SCAN_LATTICES = (8, 2)


def gen_scan_noise(rng: np.random.Generator, clean, params: ScanNoiseParams) -> np.ndarray:
    """Row-coherent noise with std k*|grad(clean)| + b at each pixel.

    Two per-row value-noise octaves (lattices 8 and 2 px) are each normalized
    to zero mean/unit std, mixed half and half, renormalized per row, then
    modulated by the std map. Rows are mutually independent.
    """
    params.validate()
    clean = as_image(clean)
    h, w = clean.shape
    if w < 2:
        raise ValueError("scan noise needs at least 2 columns")
    grad = gradient_magnitude(clean) if min(h, w) >= 3 else np.zeros_like(clean)
    sigma_map = np.maximum(max(params.k, 0.0) * grad + params.b, 0.0)
    coarse = _unit_rows(_value_noise_rows(rng, h, w, SCAN_LATTICES[0]))
    fine = _unit_rows(_value_noise_rows(rng, h, w, SCAN_LATTICES[1]))
    combined = _unit_rows(0.5 * coarse + 0.5 * fine)
    return combined * sigma_map


def gen_pointwise_noise(rng: np.random.Generator, base, params: PointwiseParams) -> np.ndarray:
    """Pixel-independent Tukey-lambda noise with std k*base + b (clamped at 0)."""
    params.validate()
    base = as_image(base)
    sigma_map = np.maximum(params.k * base + params.b, 0.0)
    return _tukey_field(rng, base.shape, params.lam) * sigma_map


@dataclass(frozen=True)
class NoiseComponents:
    """Individual noise maps plus the composed outputs, kept unclamped."""

    background: np.ndarray
    scan: np.ndarray
    pointwise: np.ndarray
    pre_clamp: np.ndarray
    noisy: np.ndarray


def apply_noise_components(clean, profile: NoiseProfile, rng: np.random.Generator) -> NoiseComponents:
    """Compose clean + background + scan + pointwise; clamp only the final frame.

    The scan std map and the pointwise std map are driven by the noise-free
    composite (clean plus background), which is the true signal level at each
    pixel. Draw order is fixed (background, scan, pointwise) so a given seed
    always produces the same frame.
    """
    profile.validate()
    clean = as_image(clean)
    h, w = clean.shape
    background = gen_background(rng, profile.background, w, h)
    composite = clean + background
    scan = gen_scan_noise(rng, composite, profile.scan)
    pointwise = gen_pointwise_noise(rng, composite, profile.pointwise)
    pre_clamp = composite + scan + pointwise
    noisy = np.clip(pre_clamp, 0.0, 255.0)
    return NoiseComponents(background, scan, pointwise, pre_clamp, noisy)


def apply_noise(clean, profile: NoiseProfile, rng: np.random.Generator) -> np.ndarray:
    """Noisy frame for a clean render, clamped to [0, 255]."""
    return apply_noise_components(clean, profile, rng).noisy
