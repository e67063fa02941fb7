"""Synthetic training data: random ellipse phantoms, tumour insertion,
Poisson corruption at calibrated count levels, and endless training streams.

Peak values calibrate the count level (after the normalized projector, a
peak of 1e4 gives roughly percent-level relative noise, 1e2 tens of
percent). Sinogram entries stay floats after the Poisson draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridio import load_grid, save_grid

PROVENANCE_TAGS = ("synthetic-ellipses", "external-file", "tumour-modified")


@dataclass
class Phantom:
    image: np.ndarray
    peak_value: float
    provenance: str = "synthetic-ellipses"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.provenance not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.peak_value <= 0:
            raise ValueError("peak_value must be positive")
        if np.any(self.image < 0):
            raise ValueError("phantom pixels must be nonnegative")


@dataclass
class TrainingTuple:
    """One supervised example: ground truth, noisy observation, the operator
    that produced it, and the peak used to calibrate counts."""
    x: np.ndarray
    y: np.ndarray
    operator: object
    peak: float


def generate_ellipse_phantom(height, width, peak, rng_seed) -> Phantom:
    """Sum of 3-8 random ellipses, rescaled so the maximum equals `peak`.

    Centers fall in the central 80% of the image, semi-axes span 5-40% of
    the image side, rotations are uniform in [0, pi), intensities uniform
    in [0.2, 1] before rescaling. Deterministic given the seed.
    """
    if height < 2 or width < 2:
        raise ValueError("image dims must be >= 2")
    if peak <= 0:
        raise ValueError("peak must be positive")
    rng = np.random.default_rng(rng_seed)
    n_ellipses = int(rng.integers(3, 9))
    rows = np.arange(height)[:, None] - (height - 1) / 2.0
    cols = np.arange(width)[None, :] - (width - 1) / 2.0
    img = np.zeros((height, width))
    side = min(height, width)
    for _ in range(n_ellipses):
        cy = rng.uniform(-0.4, 0.4) * height
        cx = rng.uniform(-0.4, 0.4) * width
        a = rng.uniform(0.05, 0.40) * side
        b = rng.uniform(0.05, 0.40) * side
        phi = rng.uniform(0.0, np.pi)
        amp = rng.uniform(0.2, 1.0)
        dy, dx = rows - cy, cols - cx
        ry = dy * np.cos(phi) - dx * np.sin(phi)
        rx = dy * np.sin(phi) + dx * np.cos(phi)
        img += amp * ((ry / a) ** 2 + (rx / b) ** 2 <= 1.0)
    img = np.clip(img, 0.0, None)
    m = img.max()
    if m == 0:
        # extremely unlikely (ellipse centers are interior); fall back to a disk
        img += ((rows / (0.3 * side)) ** 2 + (cols / (0.3 * side)) ** 2 <= 1.0).astype(float)
        m = img.max()
    return Phantom(image=img * (peak / m), peak_value=float(peak))


def insert_tumour(phantom: Phantom, center, radius) -> Phantom:
    """Set all pixels within `radius` (Euclidean, integer grid) of `center`
    to the phantom's peak value. The disk must lie fully inside the image."""
    ci, cj = center
    h, w = phantom.image.shape
    if not (ci - radius >= 0 and ci + radius <= h - 1
            and cj - radius >= 0 and cj + radius <= w - 1):
        raise ValueError(f"tumour disk (center {center}, radius {radius}) leaves the image")
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    mask = (ii - ci) ** 2 + (jj - cj) ** 2 <= radius ** 2
    img = phantom.image.copy()
    img[mask] = phantom.peak_value
    return Phantom(image=img, peak_value=phantom.peak_value, provenance="tumour-modified")


def poissonize(clean: np.ndarray, rng_seed) -> np.ndarray:
    """Entrywise Poisson draw y_i ~ Pois(clean_i), returned as floats."""
    clean = np.asarray(clean, dtype=np.float64)
    if np.any(clean < 0):
        raise ValueError("Poisson intensities must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    return rng.poisson(clean).astype(np.float64)


@dataclass
class StreamConfig:
    batch_size: int
    peak: float | tuple = 1e4
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def make_training_stream(config: StreamConfig, operator):
    """Endless iterator of TrainingTuple batches: fresh phantoms, projected
    and Poisson-corrupted on the fly. Fully determined by the seed.

    `config.peak` may be a single calibration level or a sequence, in which
    case each tuple draws its peak uniformly from the sequence.
    """
    rng = np.random.default_rng(config.rng_seed)
    h, w = operator.geometry.image_shape
    peaks = config.peak if isinstance(config.peak, (tuple, list)) else (config.peak,)

    def stream():
        while True:
            batch = []
            for _ in range(config.batch_size):
                peak = float(peaks[rng.integers(0, len(peaks))]) if len(peaks) > 1 else float(peaks[0])
                phantom = generate_ellipse_phantom(h, w, peak, int(rng.integers(0, 2 ** 63 - 1)))
                clean = operator.apply(phantom.image)
                y = poissonize(clean, int(rng.integers(0, 2 ** 63 - 1)))
                batch.append(TrainingTuple(x=phantom.image, y=y, operator=operator, peak=peak))
            yield batch

    return stream()


def load_phantom_file(path, peak) -> Phantom:
    """Load a grid file and rescale so the maximum equals `peak`."""
    img = load_grid(path)
    if np.any(img < 0):
        raise ValueError(f"phantom file contains negative values: {path}")
    m = img.max()
    if m == 0:
        raise ValueError(f"phantom file is all zeros, cannot calibrate peak: {path}")
    return Phantom(image=img * (peak / m), peak_value=float(peak), provenance="external-file")


def save_phantom_file(path, phantom: Phantom) -> None:
    save_grid(path, phantom.image)
