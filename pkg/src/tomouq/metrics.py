"""Image quality scoring and credible-interval extraction.

PSNR and SSIM follow the common conventions (SSIM: 11x11 Gaussian window,
sigma 1.5, stabilizers (0.01 r)^2 and (0.03 r)^2 for data range r). HPD
bands use the Gaussian marginal form mean +/- z * sqrt(variance), with the
background variance optionally subtracted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d
from scipy.special import ndtri

from .phantoms import poissonize
from .posterior import PosteriorSummary


def psnr(x, ref, data_range):
    """10 log10(data_range^2 / MSE); +inf for identical images."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    mse = float(((x - ref) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    kern = np.outer(g, g)
    return kern / kern.sum()


def ssim(x, ref, data_range, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local structural similarity over valid window positions."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if min(x.shape) < window_size:
        raise ValueError(f"image {x.shape} smaller than the {window_size}x{window_size} window")
    kern = _gaussian_window(window_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    mu_x = convolve2d(x, kern, mode="valid")
    mu_r = convolve2d(ref, kern, mode="valid")
    var_x = convolve2d(x * x, kern, mode="valid") - mu_x ** 2
    var_r = convolve2d(ref * ref, kern, mode="valid") - mu_r ** 2
    cov = convolve2d(x * ref, kern, mode="valid") - mu_x * mu_r

    num = (2 * mu_x * mu_r + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_r ** 2 + c1) * (var_x + var_r + c2)
    return float((num / den).mean())


HPD_VARIANTS = ("full-variance", "without-background")


@dataclass
class HpdBand:
    slice_index: int
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    variant: str


def hpd_band(summary: PosteriorSummary, slice_index, level=0.95,
             variant="full-variance") -> HpdBand:
    """Highest-posterior-density band of one horizontal slice under the
    Gaussian marginal: mean +/- Phi^{-1}((1+level)/2) * std. The
    "without-background" variant subtracts the uniform background variance
    before taking the root."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if variant not in HPD_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {HPD_VARIANTS}")
    if not 0 <= slice_index < summary.mean.shape[0]:
        raise ValueError(f"slice {slice_index} outside image of height {summary.mean.shape[0]}")
    mean = summary.mean[slice_index]
    variance = summary.variance[slice_index]
    if variant == "without-background":
        variance = np.clip(variance - summary.beta, 0.0, None)
    half = ndtri((1.0 + level) / 2.0) * np.sqrt(variance)
    return HpdBand(slice_index=slice_index, mean=mean, lower=mean - half,
                   upper=mean + half, level=level, variant=variant)


@dataclass
class QualityReport:
    rows: list = field(default_factory=list)   # dicts: phantom, method, count_level, ssim, psnr

    def add(self, phantom_id, method, count_level, ssim_value, psnr_value):
        self.rows.append({"phantom": phantom_id, "method": method,
                          "count_level": count_level, "ssim": ssim_value,
                          "psnr": psnr_value})

    def aggregates(self):
        """Mean SSIM/PSNR per (method, count_level)."""
        groups = {}
        for row in self.rows:
            groups.setdefault((row["method"], row["count_level"]), []).append(row)
        out = {}
        for key, rows in sorted(groups.items()):
            out[key] = {"ssim": float(np.mean([r["ssim"] for r in rows])),
                        "psnr": float(np.mean([r["psnr"] for r in rows])),
                        "n": len(rows)}
        return out

    def to_tsv(self):
        lines = ["phantom\tmethod\tcount_level\tssim\tpsnr"]
        for row in self.rows:
            lines.append(f"{row['phantom']}\t{row['method']}\t{row['count_level']:.17g}"
                         f"\t{row['ssim']:.17g}\t{row['psnr']:.17g}")
        lines.append("")
        lines.append("method\tcount_level\tmean_ssim\tmean_psnr\tn")
        for (method, level), agg in self.aggregates().items():
            lines.append(f"{method}\t{level:.17g}\t{agg['ssim']:.17g}"
                         f"\t{agg['psnr']:.17g}\t{agg['n']}")
        return "\n".join(lines) + "\n"

    def series(self):
        """Plot-ready series: method -> sorted (phantom, psnr) pairs per level."""
        out = {}
        for row in self.rows:
            out.setdefault((row["method"], row["count_level"]), []).append(
                (row["phantom"], row["ssim"], row["psnr"]))
        for key in out:
            out[key].sort()
        return out

    def series_tsv(self):
        lines = ["method\tcount_level\tphantom\tssim\tpsnr"]
        for (method, level), points in sorted(self.series().items()):
            for phantom_id, s, p in points:
                lines.append(f"{method}\t{level:.17g}\t{phantom_id}\t{s:.17g}\t{p:.17g}")
        return "\n".join(lines) + "\n"


def compare_methods(phantoms, operator, methods, count_levels, rng_seed=0) -> QualityReport:
    """Score reconstruction methods over phantoms and count levels.

    `phantoms` are unit-peak images; each is rescaled per count level,
    projected and Poisson-corrupted (seeded), then every method (a callable
    (op, y, peak) -> image in raw units) is scored against the scaled truth
    with data_range equal to the peak.
    """
    if not methods:
        raise ValueError("no methods given")
    report = QualityReport()
    seed = rng_seed
    for pid, base in enumerate(phantoms):
        base = np.asarray(base, dtype=np.float64)
        if base.max() <= 0:
            raise ValueError(f"phantom {pid} has no positive support")
        unit = base / base.max()
        for level in count_levels:
            truth = unit * level
            y = poissonize(operator.apply(truth), rng_seed=seed)
            seed += 1
            for name, method in methods.items():
                recon = method(operator, y, level)
                report.add(pid, name, level, ssim(recon, truth, data_range=level),
                           psnr(recon, truth, data_range=level))
    return report
