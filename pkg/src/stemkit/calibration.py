"""Noise-profile estimation from atom-bearing frames.

The decomposition works on a single noisy frame:

  clean proxy     = 2-D Gaussian blur of the frame
  scan noise      = row-wise blur - clean proxy
  pointwise noise = frame - row-wise blur

Atom brightness is the max-min spread of the clean proxy; background bounds
come from per-patch extremes of the proxy. Scan and pointwise parameters are
fitted from binned standard deviations (std vs gradient magnitude, std vs
brightness), and the Tukey-lambda shape by maximizing the probability-plot
correlation coefficient over a shape grid.

The subtraction filters bias the raw statistics in two known ways, and both
are corrected with constants derived from the filter kernels themselves:

  * high-pass leakage: (frame - row blur) removes part of the pointwise noise
    itself, so the extracted map is rescaled by the exact reciprocal gain of
    the discrete high-pass kernel;
  * the scan map keeps a residue of the pointwise noise and loses part of the
    scan signal, so the scan fit subtracts the predicted per-bin pointwise
    residue variance (using the already-fitted pointwise law) and divides by
    the extraction's amplitude retention measured on unit scan noise.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .image import as_image, gaussian_blur_2d, gaussian_blur_rows, gaussian_kernel_1d, gradient_magnitude
from .noise import (
    BF,
    HAADF,
    BackgroundParams,
    NoiseProfile,
    PointwiseParams,
    ScanNoiseParams,
    check_mode,
    gen_scan_noise,
    tukey_quantile,
)
from .rng import make_rng

DEFAULT_SIGMA2D = 5.0
DEFAULT_SIGMA_ROW = 2.0
DEFAULT_PATCH = 64
DEFAULT_N_BINS = 32
DEFAULT_MIN_BIN_FRAC = 0.005
DEFAULT_LAMBDA_GRID = np.round(np.arange(-0.30, 0.80 + 1e-9, 0.01), 10)
_ATOM_THRESHOLD = 5.0
_PPCC_MAX_SAMPLES = 200_000


class NoAtomsError(ValueError):
    """Raised when a frame has no usable brightness contrast."""


class FitError(ValueError):
    """Raised when a parameter fit cannot be carried out."""


# ---------------------------------------------------------------------------
# extraction


def estimate_clean(img, sigma2d: float = DEFAULT_SIGMA2D) -> np.ndarray:
    """Clean-image proxy: 2-D Gaussian blur as approximate noise removal."""
    return gaussian_blur_2d(img, sigma2d)


def calibrate_atom_brightness(
    img,
    mode: str = HAADF,
    sigma2d: float = DEFAULT_SIGMA2D,
    threshold: float = _ATOM_THRESHOLD,
) -> tuple[float, float, float]:
    """Atom brightness |b_central - b_background| from the blurred frame.

    Returns (b_atom, b_central, b_background). Atom centers are the bright
    extreme in HAADF and the dark extreme in BF.
    """
    check_mode(mode)
    blurred = estimate_clean(img, sigma2d)
    hi = float(blurred.max())
    lo = float(blurred.min())
    if hi - lo <= threshold:
        raise NoAtomsError(f"no atoms detected: blurred contrast {hi - lo:.2f} <= {threshold}")
    if mode == HAADF:
        b_central, b_background = hi, lo
    else:
        b_central, b_background = lo, hi
    return abs(b_central - b_background), b_central, b_background


def calibrate_background(
    img,
    mode: str = HAADF,
    patch: int = DEFAULT_PATCH,
    sigma2d: float = DEFAULT_SIGMA2D,
) -> tuple[float, float]:
    """Background brightness bounds from per-patch extremes of the blurred frame.

    Each patch contributes its background-side extreme (min in HAADF, max in
    BF, where atoms cannot reach); the spread of those values across the patch
    grid bounds the smooth background field.
    """
    check_mode(mode)
    img = as_image(img)
    h, w = img.shape
    if patch < 1 or patch > min(h, w):
        raise ValueError(f"patch must be in [1, {min(h, w)}], got {patch}")
    blurred = estimate_clean(img, sigma2d)
    values = []
    for y0 in range(0, h, patch):
        for x0 in range(0, w, patch):
            block = blurred[y0 : y0 + patch, x0 : x0 + patch]
            values.append(block.min() if mode == HAADF else block.max())
    values = np.asarray(values)
    return float(values.min()), float(values.max())


def extract_scan_noise(
    img,
    sigma_row: float = DEFAULT_SIGMA_ROW,
    sigma2d: float = DEFAULT_SIGMA2D,
) -> np.ndarray:
    """Scan-noise map: row-wise blur minus the 2-D clean proxy."""
    return gaussian_blur_rows(img, sigma_row) - estimate_clean(img, sigma2d)


@functools.lru_cache(maxsize=None)
def pointwise_highpass_gain(sigma_row: float = DEFAULT_SIGMA_ROW) -> float:
    """Variance gain of (identity - row blur) on unit white noise.

    For kernel weights w the gain is 1 - 2*w0 + sum(w^2): the subtraction
    removes part of the very noise it should isolate, so raw extracted
    variance underestimates the true pointwise variance by this factor.
    """
    k = gaussian_kernel_1d(sigma_row)
    w0 = float(k[len(k) // 2])
    return 1.0 - 2.0 * w0 + float(np.sum(k * k))


def extract_pointwise_noise(img, sigma_row: float = DEFAULT_SIGMA_ROW) -> np.ndarray:
    """Pointwise-noise map: frame minus row-wise blur, variance-corrected.

    The raw difference is rescaled by 1/sqrt(highpass gain) so its local std
    estimates the true pointwise std without bias.
    """
    img = as_image(img)
    diff = img - gaussian_blur_rows(img, sigma_row)
    return diff / math.sqrt(pointwise_highpass_gain(sigma_row))


@functools.lru_cache(maxsize=None)
def scan_leak_coefficient(sigma_row: float = DEFAULT_SIGMA_ROW, sigma2d: float = DEFAULT_SIGMA2D) -> float:
    """Variance gain of (row blur - 2-D blur) on unit white noise.

    This is how much pointwise-noise variance leaks into the extracted scan
    map. With row kernel a and 2-D kernel b(x)b(y), the gain is
    sum(a^2) - 2*b(0)*sum(a*b) + sum(b^2)^2.
    """
    ka = gaussian_kernel_1d(sigma_row)
    kb = gaussian_kernel_1d(sigma2d)
    ra, rb = len(ka) // 2, len(kb) // 2
    r = max(ra, rb)
    a = np.zeros(2 * r + 1)
    a[r - ra : r + ra + 1] = ka
    b = np.zeros(2 * r + 1)
    b[r - rb : r + rb + 1] = kb
    return float(np.sum(a * a) - 2.0 * b[r] * np.sum(a * b) + np.sum(b * b) ** 2)


@functools.lru_cache(maxsize=None)
def scan_extraction_gain(sigma_row: float = DEFAULT_SIGMA_ROW, sigma2d: float = DEFAULT_SIGMA2D) -> float:
    """Amplitude retention of unit scan noise under the extraction filters.

    Measured once on a large pure scan-noise frame (k=0, b=1) with a fixed
    internal seed; deterministic for given blur scales.
    """
    rng = make_rng(0x5CA11B)
    unit = gen_scan_noise(rng, np.zeros((256, 1024)), ScanNoiseParams(0.0, 1.0))
    extracted = gaussian_blur_rows(unit, sigma_row) - gaussian_blur_2d(unit, sigma2d)
    return float(extracted.std())


# ---------------------------------------------------------------------------
# binned fitting


@dataclass
class BinnedFit:
    """Result of one std-vs-coordinate regression with bin bookkeeping."""

    slope: float
    intercept: float
    r2: float
    bin_centers: np.ndarray
    bin_stds: np.ndarray
    bin_counts: np.ndarray
    kept: np.ndarray  # bool per bin: survived the occupancy cut

    @property
    def discarded_bins(self) -> np.ndarray:
        return np.flatnonzero(~self.kept)

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "bin_centers": [round(float(c), 6) for c in self.bin_centers],
            "bin_stds": [round(float(s), 6) for s in self.bin_stds],
            "bin_counts": [int(c) for c in self.bin_counts],
            "discarded_bins": [int(i) for i in self.discarded_bins],
        }


def _binned_variances(values: np.ndarray, coords: np.ndarray, n_bins: int):
    lo = float(coords.min())
    hi = float(coords.max())
    if hi - lo < 1e-9:
        raise FitError("coordinate range is degenerate; cannot bin")
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.digitize(coords.ravel(), edges) - 1, 0, n_bins - 1)
    v = values.ravel()
    counts = np.bincount(which, minlength=n_bins)
    safe = np.maximum(counts, 1)
    means = np.bincount(which, weights=v, minlength=n_bins) / safe
    sq = np.bincount(which, weights=v * v, minlength=n_bins) / safe
    variances = np.maximum(sq - means * means, 0.0)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, variances, counts, which


def _ols_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx <= 0:
        raise FitError("zero spread in fit abscissa")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return slope, intercept, r2


def fit_scan_noise(
    noise,
    grad,
    n_bins: int = DEFAULT_N_BINS,
    min_bin_frac: float = DEFAULT_MIN_BIN_FRAC,
    leak_variance=None,
    amplitude_gain: float = 1.0,
) -> tuple[ScanNoiseParams, BinnedFit]:
    """Slope/intercept of scan-noise std vs gradient magnitude by binned OLS.

    Pixels are bucketed into equal-width gradient bins; per-bin sample stds
    are regressed on the bin centers. Bins holding less than `min_bin_frac`
    of all pixels are discarded (but reported). `leak_variance` (a per-pixel
    variance map) is subtracted bin-wise and the corrected std divided by
    `amplitude_gain` before fitting; the defaults leave the statistics raw.
    """
    noise = as_image(noise)
    grad = as_image(grad)
    if noise.shape != grad.shape:
        raise ValueError(f"shape mismatch: {noise.shape} vs {grad.shape}")
    centers, variances, counts, which = _binned_variances(noise, grad, n_bins)
    if leak_variance is not None:
        leak = as_image(leak_variance)
        if leak.shape != noise.shape:
            raise ValueError("leak variance map must match the noise map")
        leak_bin = np.bincount(which, weights=leak.ravel(), minlength=n_bins) / np.maximum(counts, 1)
        variances = np.maximum(variances - leak_bin, 0.0)
    stds = np.sqrt(variances) / amplitude_gain
    kept = counts >= max(2, min_bin_frac * counts.sum())
    if kept.sum() < 3:
        raise FitError("insufficient gradient diversity: fewer than 3 usable bins")
    slope, intercept, r2 = _ols_line(centers[kept], stds[kept])
    return ScanNoiseParams(slope, max(intercept, 0.0)), BinnedFit(
        slope, intercept, r2, centers, stds, counts, kept
    )


def ppcc_curve(samples: np.ndarray, lambda_grid=DEFAULT_LAMBDA_GRID) -> np.ndarray:
    """Probability-plot correlation coefficient at each candidate shape.

    Uses Filliben's order-statistic medians as plotting positions, so results
    agree with the standard PPCC procedure.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n < 10:
        raise FitError(f"need at least 10 samples for a PPCC fit, got {n}")
    if x[0] == x[-1]:
        raise FitError("degenerate samples: all values equal")
    m = (np.arange(1, n + 1) - 0.3175) / (n + 0.365)
    m[0] = 1.0 - 0.5 ** (1.0 / n)
    m[-1] = 0.5 ** (1.0 / n)
    xc = x - x.mean()
    xn = math.sqrt(float(np.sum(xc * xc)))
    scores = np.empty(len(lambda_grid))
    for i, lam in enumerate(lambda_grid):
        q = tukey_quantile(m, float(lam))
        qc = q - q.mean()
        scores[i] = float(np.dot(qc, xc)) / (math.sqrt(float(np.sum(qc * qc))) * xn)
    return scores


def ppcc_fit(samples: np.ndarray, lambda_grid=DEFAULT_LAMBDA_GRID) -> tuple[float, np.ndarray]:
    """Shape parameter maximizing the PPCC, plus the full score curve."""
    scores = ppcc_curve(samples, lambda_grid)
    return float(lambda_grid[int(np.argmax(scores))]), scores


def fit_pointwise(
    noise,
    base,
    n_bins: int = DEFAULT_N_BINS,
    min_bin_frac: float = DEFAULT_MIN_BIN_FRAC,
    lambda_grid=DEFAULT_LAMBDA_GRID,
) -> tuple[PointwiseParams, BinnedFit, np.ndarray]:
    """Pointwise law (k, b) by binned OLS of std vs brightness; shape by PPCC.

    The shape is fitted on all surviving-bin samples after per-bin
    standardization, which removes the brightness dependence of the std and
    pools the whole frame into one shape estimate.
    """
    noise = as_image(noise)
    base = as_image(base)
    if noise.shape != base.shape:
        raise ValueError(f"shape mismatch: {noise.shape} vs {base.shape}")
    centers, variances, counts, which = _binned_variances(noise, base, n_bins)
    stds = np.sqrt(variances)
    kept = counts >= max(2, min_bin_frac * counts.sum())
    if kept.sum() < 3:
        raise FitError("insufficient brightness diversity: fewer than 3 usable bins")
    slope, intercept, r2 = _ols_line(centers[kept], stds[kept])

    flat_noise = noise.ravel()
    flat_which = which
    keep_mask = kept[flat_which] & (stds[flat_which] > 1e-12)
    means_per_bin = np.bincount(flat_which, weights=flat_noise, minlength=n_bins) / np.maximum(counts, 1)
    standardized = (flat_noise[keep_mask] - means_per_bin[flat_which[keep_mask]]) / stds[
        flat_which[keep_mask]
    ]
    if standardized.size > _PPCC_MAX_SAMPLES:
        stride = standardized.size // _PPCC_MAX_SAMPLES + 1
        standardized = standardized[::stride]
    lam, scores = ppcc_fit(standardized, lambda_grid)
    params = PointwiseParams(slope, max(intercept, 0.0), lam)
    return params, BinnedFit(slope, intercept, r2, centers, stds, counts, kept), scores


# ---------------------------------------------------------------------------
# whole-frame calibration


@dataclass
class CalibrationReport:
    """One frame's fitted profile plus fit diagnostics."""

    profile: NoiseProfile
    scan_fit: BinnedFit
    pointwise_fit: BinnedFit
    ppcc_lambdas: np.ndarray
    ppcc_scores: np.ndarray
    sigma2d: float
    sigma_row: float
    patch: int
    image_id: str = ""
    source_bit_depth: int | None = None
    b_central: float = 0.0
    b_background: float = 0.0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = self.profile.to_dict()
        d["image_id"] = self.image_id
        d["b_central"] = self.b_central
        d["b_background"] = self.b_background
        d["source_bit_depth"] = self.source_bit_depth
        d["diagnostics"] = {
            "sigma2d": self.sigma2d,
            "sigma_row": self.sigma_row,
            "patch": self.patch,
            "scan_fit": self.scan_fit.to_dict(),
            "pointwise_fit": self.pointwise_fit.to_dict(),
            "ppcc_lambdas": [float(v) for v in self.ppcc_lambdas],
            "ppcc_scores": [round(float(v), 6) for v in self.ppcc_scores],
            "notes": list(self.notes),
        }
        return d


def detect_polarity(img, sigma2d: float = DEFAULT_SIGMA2D) -> str:
    """Heuristic mode guess: compare the bright and dark tail spans.

    Compact bright spots on a dark field stretch the bright tail (HAADF);
    dark spots on a bright field stretch the dark tail (BF). Offered as a
    consistency check only; calibration never switches modes silently.
    """
    blurred = estimate_clean(img, sigma2d)
    p_lo, p_mid, p_hi = np.percentile(blurred, (0.5, 50.0, 99.5))
    return HAADF if (p_hi - p_mid) >= (p_mid - p_lo) else BF


def calibrate_image(
    img,
    mode: str = HAADF,
    sigma2d: float = DEFAULT_SIGMA2D,
    sigma_row: float = DEFAULT_SIGMA_ROW,
    patch: int = DEFAULT_PATCH,
    n_bins: int = DEFAULT_N_BINS,
    min_bin_frac: float = DEFAULT_MIN_BIN_FRAC,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    image_id: str = "",
    source_bit_depth: int | None = None,
    correct_scan: bool = True,
    bg_lattice: int = 48,
) -> CalibrationReport:
    """Full single-frame calibration.

    Stages: clean proxy, atom brightness, background bounds, pointwise fit,
    then the scan fit. Pointwise is fitted before scan because the scan fit
    subtracts the predicted pointwise residue from its binned variances
    (see module docstring); gradients are taken on the clean proxy so they
    are not inflated by noise.
    """
    img = as_image(img)
    check_mode(mode)
    try:
        b_atom, b_central, b_background = calibrate_atom_brightness(img, mode, sigma2d)
    except NoAtomsError:
        raise
    except ValueError as e:
        raise FitError(f"brightness stage failed: {e}") from e
    try:
        bg_min, bg_max = calibrate_background(img, mode, patch, sigma2d)
    except ValueError as e:
        raise FitError(f"background stage failed: {e}") from e

    clean = estimate_clean(img, sigma2d)
    try:
        pw_map = extract_pointwise_noise(img, sigma_row)
        pw_params, pw_fit, ppcc_scores = fit_pointwise(pw_map, clean, n_bins, min_bin_frac, lambda_grid)
    except ValueError as e:
        raise FitError(f"pointwise stage failed: {e}") from e

    try:
        scan_map = extract_scan_noise(img, sigma_row, sigma2d)
        grad = gradient_magnitude(clean)
        leak_variance = None
        amplitude_gain = 1.0
        if correct_scan:
            sigma_pw = np.maximum(pw_params.k * clean + pw_params.b, 0.0)
            leak_variance = scan_leak_coefficient(sigma_row, sigma2d) * sigma_pw**2
            amplitude_gain = scan_extraction_gain(sigma_row, sigma2d)
        scan_params, scan_fit = fit_scan_noise(
            scan_map, grad, n_bins, min_bin_frac, leak_variance, amplitude_gain
        )
    except ValueError as e:
        raise FitError(f"scan stage failed: {e}") from e

    profile = NoiseProfile(
        b_atom=b_atom,
        background=BackgroundParams(
            min(bg_min, bg_max), max(bg_min, bg_max), lattice=bg_lattice
        ),
        scan=ScanNoiseParams(max(scan_params.k, 0.0), max(scan_params.b, 0.0)),
        pointwise=PointwiseParams(
            pw_params.k, max(pw_params.b, 0.0), float(np.clip(pw_params.lam, -0.5, 1.0))
        ),
        mode=mode,
    )
    notes = []
    if scan_fit.r2 < 0.5:
        notes.append(f"low scan-fit R2 ({scan_fit.r2:.3f}): gradient dependence weak or absent")
    guess = detect_polarity(img, sigma2d)
    if guess != mode:
        notes.append(f"polarity check suggests {guess!r} but mode is {mode!r}")
    return CalibrationReport(
        profile=profile,
        scan_fit=scan_fit,
        pointwise_fit=pw_fit,
        ppcc_lambdas=np.asarray(lambda_grid, dtype=np.float64),
        ppcc_scores=ppcc_scores,
        sigma2d=sigma2d,
        sigma_row=sigma_row,
        patch=patch,
        image_id=image_id,
        source_bit_depth=source_bit_depth,
        b_central=b_central,
        b_background=b_background,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# corpus aggregation


@dataclass
class ProfileStats:
    """Per-parameter mean/std over a corpus, plus corpus extremes."""

    mode: str
    n: int
    means: dict
    stds: dict
    b_atom_min: float
    b_atom_max: float
    bg_min: float
    bg_max: float
    bg_lattice: int = 48

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "means": {k: float(v) for k, v in self.means.items()},
            "stds": {k: float(v) for k, v in self.stds.items()},
            "b_atom_min": self.b_atom_min,
            "b_atom_max": self.b_atom_max,
            "bg_min": self.bg_min,
            "bg_max": self.bg_max,
            "bg_lattice": self.bg_lattice,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileStats":
        return cls(
            mode=str(d["mode"]),
            n=int(d["n"]),
            means={k: float(v) for k, v in d["means"].items()},
            stds={k: float(v) for k, v in d["stds"].items()},
            b_atom_min=float(d["b_atom_min"]),
            b_atom_max=float(d["b_atom_max"]),
            bg_min=float(d["bg_min"]),
            bg_max=float(d["bg_max"]),
            bg_lattice=int(d.get("bg_lattice", 48)),
        )


_STAT_FIELDS = ("b_atom", "bg_min", "bg_max", "scan_k", "scan_b", "pw_k", "pw_b", "pw_lambda")


def aggregate(reports) -> ProfileStats:
    """Corpus statistics over calibration reports of a single mode."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report to aggregate")
    modes = {r.profile.mode for r in reports}
    if len(modes) != 1:
        raise ValueError(f"cannot aggregate mixed modes: {sorted(modes)}")
    table = {name: [] for name in _STAT_FIELDS}
    for r in reports:
        d = r.profile.to_dict()
        for name in _STAT_FIELDS:
            table[name].append(d[name])
    arrays = {name: np.asarray(vals, dtype=np.float64) for name, vals in table.items()}
    ddof = 1 if len(reports) > 1 else 0
    return ProfileStats(
        mode=modes.pop(),
        n=len(reports),
        means={name: float(a.mean()) for name, a in arrays.items()},
        stds={name: float(a.std(ddof=ddof)) for name, a in arrays.items()},
        b_atom_min=float(arrays["b_atom"].min()),
        b_atom_max=float(arrays["b_atom"].max()),
        bg_min=float(arrays["bg_min"].min()),
        bg_max=float(arrays["bg_max"].max()),
        bg_lattice=int(reports[0].profile.background.lattice),
    )
