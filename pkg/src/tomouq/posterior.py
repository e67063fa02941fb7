"""Posterior sampling and summarizing statistics.

Each sample is the decoder's mean for one latent draw from the student
encoder, so the modelled posterior is a Gaussian mixture over z and its
diagonal covariance estimate is

    var_j = beta + (1/S) sum_i x_{i,j}^2 - mean_j^2

the background term beta being a uniform floor on every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .cvae import ModelBundle, decode_batch, student_encode


@dataclass
class PosteriorSummary:
    samples: np.ndarray        # (S, H, W), calibration-normalized units
    mean: np.ndarray
    variance: np.ndarray
    beta: float
    scale: float = 1.0         # calibration peak of the observation

    @property
    def num_samples(self):
        return self.samples.shape[0]


def estimate_stats(samples, beta):
    """Sample mean and beta-floored diagonal covariance of a sample stack."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim < 1 or samples.shape[0] < 1:
        raise ValueError("need at least one sample")
    s = samples.shape[0]
    mean = samples.sum(axis=0) / s
    second = (samples * samples).sum(axis=0) / s
    variance = beta + second - mean * mean
    return mean, variance


def sample_posterior(bundle: ModelBundle, y, op, S, rng, scale=1.0,
                     chunk=64) -> PosteriorSummary:
    """Draw S posterior samples for observation `y` (raw counts; `scale` is
    its calibration peak), decoding each latent draw from the back-projected
    data with zeroed memory."""
    if S < 1:
        raise ValueError("S must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    y_n = y / scale
    latent = student_encode(bundle.student, y_n, d_z=bundle.d_z)
    eps = rng.normal(size=(S, bundle.d_z))
    z = latent.mean[None] + np.exp(0.5 * latent.log_var)[None] * eps
    x0 = op.adjoint(y_n)
    samples = np.empty((S,) + op.geometry.image_shape)
    for lo in range(0, S, chunk):
        hi = min(lo + chunk, S)
        samples[lo:hi] = decode_batch(bundle.recurrent, y_n, op, z[lo:hi],
                                      K=bundle.K, x0=x0, e_mode=bundle.e_mode,
                                      r_mode=bundle.r_mode)
    mean, variance = estimate_stats(samples, bundle.beta)
    return PosteriorSummary(samples=samples, mean=mean, variance=variance,
                            beta=bundle.beta, scale=float(scale))


ARCHIVE_KIND = "sample-archive"


def save_archive(path, summary: PosteriorSummary, seed=None, K=None) -> None:
    meta = {"kind": ARCHIVE_KIND, "S": summary.num_samples, "beta": summary.beta,
            "scale": summary.scale}
    if seed is not None:
        meta["seed"] = seed
    if K is not None:
        meta["K"] = K
    container.save_arrays(path, {"samples": summary.samples, "mean": summary.mean,
                                 "variance": summary.variance}, meta)


def load_archive(path) -> PosteriorSummary:
    arrays, meta = container.load_arrays(path)
    if meta.get("kind") != ARCHIVE_KIND:
        raise container.ContainerError(f"not a sample archive: {path}")
    return PosteriorSummary(samples=arrays["samples"], mean=arrays["mean"],
                            variance=arrays["variance"], beta=float(meta["beta"]),
                            scale=float(meta.get("scale", 1.0)))
