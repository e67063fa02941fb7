"""Reference reconstruction methods: MLEM, TV-regularized least squares via
a primal-dual scheme, learned gradient descent (the same recurrent unit with
the latent channels removed), and a three-component Gaussian ensemble with
per-component mean and variance networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import container
from .cvae import MEMORY_CHANNELS, _decode_t
from .radon import OperatorGeometry, div2d, grad2d


# -- MLEM ---------------------------------------------------------------------

@dataclass
class MlemConfig:
    iterations: int = 20
    floor: float = 1e-12

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.floor <= 0:
            raise ValueError("floor must be positive")


def poisson_loglik(op, x, y, floor=1e-12):
    """sum_i [y_i log(Ax)_i - (Ax)_i], dropping the x-independent log(y!)."""
    ax = op.apply(x) + floor
    return float((y * np.log(ax) - ax).sum())


def mlem(op, y, config: MlemConfig = MlemConfig(), x0=None, track_loglik=False):
    """Multiplicative EM updates for the Poisson likelihood:

        x <- x * A^T(y / (Ax + eps)) / (A^T 1 + eps)

    starting from a uniform positive image. Nonnegativity is preserved and
    the likelihood is non-decreasing.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("MLEM requires nonnegative data")
    eps = config.floor
    sens = op.adjoint(np.ones(op.geometry.sinogram_shape))
    x = np.ones(op.geometry.image_shape) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    trace = [poisson_loglik(op, x, y, eps)] if track_loglik else None
    for _ in range(config.iterations):
        ratio = y / (op.apply(x) + eps)
        x = x * op.adjoint(ratio) / (sens + eps)
        if track_loglik:
            trace.append(poisson_loglik(op, x, y, eps))
    return (x, trace) if track_loglik else x


# -- TV via primal-dual hybrid gradient -----------------------------------------

@dataclass
class TvConfig:
    alpha: float = 2e-1
    iterations: int = 200
    sigma: float = 0.0   # 0 -> auto from the operator norm bound
    tau: float = 0.0
    operator_norm: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def step_sizes(self):
        # ||K||^2 <= ||A||^2 + 8 for the stacked (A, grad) operator
        norm_k = np.sqrt(self.operator_norm ** 2 + 8.0)
        if self.sigma > 0 and self.tau > 0:
            if self.sigma * self.tau * norm_k ** 2 > 1.0 + 1e-12:
                raise ValueError(
                    f"step sizes violate sigma*tau*||K||^2 <= 1 "
                    f"(got {self.sigma * self.tau * norm_k ** 2:.3f})")
            return self.sigma, self.tau
        s = 0.99 / norm_k
        return s, s


def tv_objective(op, x, y, alpha):
    residual = op.apply(x) - y
    g = grad2d(x)
    tv = np.sqrt((g ** 2).sum(axis=0)).sum()
    return 0.5 * float((residual ** 2).sum()) + alpha * tv


def tv_reconstruct(op, y, config: TvConfig = TvConfig(), track_objective=False):
    """Solve min_{x>=0} 0.5 ||Ax - y||^2 + alpha TV(x) with PDHG
    (isotropic TV, forward differences, Neumann boundary)."""
    y = np.asarray(y, dtype=np.float64)
    sigma, tau = config.step_sizes()
    alpha = config.alpha
    h, w = op.geometry.image_shape
    x = np.zeros((h, w))
    x_bar = x.copy()
    p = np.zeros(op.geometry.sinogram_shape)   # dual for the data term
    q = np.zeros((2, h, w))                    # dual for the TV term
    trace = [] if track_objective else None
    for _ in range(config.iterations):
        p = (p + sigma * (op.apply(x_bar) - y)) / (1.0 + sigma)
        q = q + sigma * grad2d(x_bar)
        mag = np.sqrt((q ** 2).sum(axis=0, keepdims=True))
        q = q / np.maximum(1.0, mag / alpha) if alpha > 0 else np.zeros_like(q)
        x_old = x
        x = np.clip(x_old - tau * (op.adjoint(p) - div2d(q)), 0.0, None)
        x_bar = 2.0 * x - x_old
        if track_objective:
            trace.append(tv_objective(op, x, y, alpha))
    return (x, trace) if track_objective else x


# -- learned gradient descent -----------------------------------------------------

@dataclass
class LgdBundle:
    """Unrolled refiner without latent channels; reconstruction is a single
    deterministic forward pass."""
    params: ad.ParamSet
    geometry: OperatorGeometry
    K: int = 10
    e_mode: str = "gradient"
    r_mode: str = "squared-l2"


def lgd_graph(width=32):
    in_ch = 1 + 1 + 1 + MEMORY_CHANNELS   # no latent channels
    return [
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=in_ch, out_channels=width),
        ad.LayerSpec("relu"),
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=width, out_channels=width),
        ad.LayerSpec("relu"),
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=width,
                      out_channels=MEMORY_CHANNELS + 1),
    ]


def make_lgd_bundle(geometry, K=10, e_mode="gradient", r_mode="squared-l2",
                    width=32, seed=0) -> LgdBundle:
    rng = np.random.default_rng(seed)
    params = ad.init_params(lgd_graph(width), rng)
    # zero final layer: the unrolled refiner starts as the identity on x0,
    # which keeps K compounded steps stable at the start of training
    params.arrays["layer4/weight"][:] = 0.0
    params.arrays["layer4/bias"][:] = 0.0
    return LgdBundle(params=params, geometry=geometry, K=K, e_mode=e_mode, r_mode=r_mode)


def _lgd_decode_t(bundle: LgdBundle, param_tensors, ys, op, x0):
    return _decode_t(lgd_graph(), param_tensors, ad.Tensor(ys), op, None,
                     bundle.K, ad.Tensor(x0), bundle.e_mode, bundle.r_mode)


def lgd_train(bundle: LgdBundle, stream, batches, lr=1e-3, rng_seed=0):
    """Mean-squared-error training of the refiner on normalized tuples."""
    trace = []
    for _ in range(batches):
        batch = next(stream)
        xs = np.stack([it.x / it.peak for it in batch])[:, None]
        ys = np.stack([it.y / it.peak for it in batch])[:, None]
        op = batch[0].operator
        pt = bundle.params.tensors()
        x0 = op.adjoint_batch(ys)
        x_hat = _lgd_decode_t(bundle, pt, ys, op, x0)
        loss = ad.mul(ad.tsum(ad.square(x_hat - ad.Tensor(xs))), 0.5 / len(batch))
        loss.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in pt.items()}
        ad.adam_step(bundle.params, grads, lr=lr)
        trace.append(float(loss.data))
    return bundle, trace


def lgd_reconstruct(op, y, bundle: LgdBundle, scale=1.0) -> np.ndarray:
    """Deterministic reconstruction in raw units."""
    y_n = np.asarray(y, dtype=np.float64) / scale
    with ad.no_grad():
        x = _lgd_decode_t(bundle, {k: ad.Tensor(v) for k, v in bundle.params.arrays.items()},
                          y_n[None, None], op, op.adjoint(y_n)[None, None])
    return x.data[0, 0] * scale


# -- Gaussian mixture ensemble (3 components) ---------------------------------------

VARIANCE_FLOOR = 1e-6
GM3_CHECKPOINT_KIND = "gm3-model"


def variance_graph(width=32):
    # input: [x0, frozen mean prediction] -> per-pixel raw variance
    return [
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=2, out_channels=width),
        ad.LayerSpec("relu"),
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=width, out_channels=width),
        ad.LayerSpec("relu"),
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=width, out_channels=1),
    ]


@dataclass
class Gm3Bundle:
    components: list           # list of (mean LgdBundle, variance ParamSet)
    geometry: OperatorGeometry

    def __post_init__(self):
        if len(self.components) != 3:
            raise ValueError("the ensemble uses exactly 3 components")


def make_gm3_bundle(geometry, K=10, width=32, seed=0) -> Gm3Bundle:
    comps = []
    for c in range(3):
        mean_bundle = make_lgd_bundle(geometry, K=K, width=width, seed=seed + 101 * c)
        var_params = ad.init_params(variance_graph(width),
                                    np.random.default_rng(seed + 101 * c + 50))
        comps.append((mean_bundle, var_params))
    return Gm3Bundle(components=comps, geometry=geometry)


def _variance_forward_t(var_tensors, x0, mean_pred):
    stack = np.concatenate([x0, mean_pred], axis=1)
    raw = ad.apply_graph(variance_graph(), var_tensors, ad.Tensor(stack))
    return ad.softplus(raw) + VARIANCE_FLOOR


def gm3_train(bundle: Gm3Bundle, stream_factory, mean_batches, var_batches,
              lr=1e-3):
    """Two-stage training per component: fit the mean by MSE, then freeze it
    and fit the variance by Gaussian negative log-likelihood.

    `stream_factory(component_index)` must return a fresh tuple stream so
    components see different data orders.
    """
    for c, (mean_bundle, var_params) in enumerate(bundle.components):
        stream = stream_factory(c)
        lgd_train(mean_bundle, stream, mean_batches, lr=lr)
        for _ in range(var_batches):
            batch = next(stream)
            xs = np.stack([it.x / it.peak for it in batch])[:, None]
            ys = np.stack([it.y / it.peak for it in batch])[:, None]
            op = batch[0].operator
            x0 = op.adjoint_batch(ys)
            with ad.no_grad():
                mean_pred = _lgd_decode_t(
                    mean_bundle,
                    {k: ad.Tensor(v) for k, v in mean_bundle.params.arrays.items()},
                    ys, op, x0).data
            vt = var_params.tensors()
            var = _variance_forward_t(vt, x0, mean_pred)
            sq_err = ad.Tensor((xs - mean_pred) ** 2)
            nll = ad.tmean(ad.mul(ad.log(var) + ad.div(sq_err, var), 0.5))
            nll.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for k, t in vt.items()}
            ad.adam_step(var_params, grads, lr=lr)
    return bundle


def gm3_predict(op, y, bundle: Gm3Bundle, scale=1.0):
    """Mixture mean and per-pixel mixture variance (uniform weights):

        mean = avg_c mu_c
        var  = avg_c (sigma_c^2 + mu_c^2) - mean^2

    Returned in raw units (mean * scale, variance * scale^2).
    """
    y_n = np.asarray(y, dtype=np.float64) / scale
    mus, sig2s = [], []
    x0 = op.adjoint(y_n)[None, None]
    for mean_bundle, var_params in bundle.components:
        with ad.no_grad():
            mu = _lgd_decode_t(
                mean_bundle,
                {k: ad.Tensor(v) for k, v in mean_bundle.params.arrays.items()},
                y_n[None, None], op, x0).data
            var = _variance_forward_t(
                {k: ad.Tensor(v) for k, v in var_params.arrays.items()}, x0, mu).data
        mus.append(mu[0, 0])
        sig2s.append(var[0, 0])
    mus = np.stack(mus)
    sig2s = np.stack(sig2s)
    mean = mus.mean(axis=0)
    variance = (sig2s + mus ** 2).mean(axis=0) - mean ** 2
    return mean * scale, variance * scale ** 2


def mixture_moments(mus, sig2s, weights=None):
    """Exact mean/variance of a Gaussian mixture (used as the GM3 oracle)."""
    mus = np.asarray(mus, dtype=np.float64)
    sig2s = np.asarray(sig2s, dtype=np.float64)
    if weights is None:
        weights = np.full(mus.shape[0], 1.0 / mus.shape[0])
    weights = np.asarray(weights, dtype=np.float64).reshape(-1, *([1] * (mus.ndim - 1)))
    mean = (weights * mus).sum(axis=0)
    variance = (weights * (sig2s + mus ** 2)).sum(axis=0) - mean ** 2
    return mean, variance


# -- LGD / GM3 checkpoints -----------------------------------------------------------

LGD_CHECKPOINT_KIND = "lgd-model"


def save_lgd(path, bundle: LgdBundle) -> None:
    container.save_arrays(path, dict(bundle.params.arrays),
                          meta={"kind": LGD_CHECKPOINT_KIND, "K": bundle.K,
                                "e_mode": bundle.e_mode, "r_mode": bundle.r_mode,
                                "geometry": bundle.geometry.to_dict()})


def load_lgd(path) -> LgdBundle:
    arrays, meta = container.load_arrays(path)
    if meta.get("kind") != LGD_CHECKPOINT_KIND:
        raise container.ContainerError(f"not an LGD checkpoint: {path}")
    return LgdBundle(params=ad.ParamSet(arrays),
                     geometry=OperatorGeometry.from_dict(meta["geometry"]),
                     K=int(meta["K"]), e_mode=meta["e_mode"], r_mode=meta["r_mode"])


def save_gm3(path, bundle: Gm3Bundle) -> None:
    arrays = {}
    meta_comp = []
    for c, (mean_bundle, var_params) in enumerate(bundle.components):
        for k, v in mean_bundle.params.arrays.items():
            arrays[f"mean{c}/{k}"] = v
        for k, v in var_params.arrays.items():
            arrays[f"var{c}/{k}"] = v
        meta_comp.append({"K": mean_bundle.K, "e_mode": mean_bundle.e_mode,
                          "r_mode": mean_bundle.r_mode})
    container.save_arrays(path, arrays, meta={"kind": GM3_CHECKPOINT_KIND,
                                              "geometry": bundle.geometry.to_dict(),
                                              "components": meta_comp})


def load_gm3(path) -> Gm3Bundle:
    arrays, meta = container.load_arrays(path)
    if meta.get("kind") != GM3_CHECKPOINT_KIND:
        raise container.ContainerError(f"not a GM3 checkpoint: {path}")
    geometry = OperatorGeometry.from_dict(meta["geometry"])
    comps = []
    for c, cmeta in enumerate(meta["components"]):
        mean_arrays = {k.split("/", 1)[1]: v for k, v in arrays.items()
                       if k.startswith(f"mean{c}/")}
        var_arrays = {k.split("/", 1)[1]: v for k, v in arrays.items()
                      if k.startswith(f"var{c}/")}
        comps.append((LgdBundle(params=ad.ParamSet(mean_arrays), geometry=geometry,
                                K=int(cmeta["K"]), e_mode=cmeta["e_mode"],
                                r_mode=cmeta["r_mode"]),
                      ad.ParamSet(var_arrays)))
    return Gm3Bundle(components=comps, geometry=geometry)
