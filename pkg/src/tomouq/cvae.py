"""Conditional-VAE posterior sampler built around an unrolled refiner.

Three networks: a teacher encoder seeing (projected truth, observation), a
student encoder seeing the observation alone, and a recurrent unit that
refines the image iterate K times. The latent code z (default dimension 6)
is the only stochastic input of the decoder: with z fixed, decoding is
deterministic, like a seeded random number generator.

Per refinement step the recurrent unit consumes the channel stack

    [x | data-consistency channel | penalty channel | memory (5ch) | z tiled]

and emits an additive update for x plus the new 5-channel memory.

All learned components operate on calibration-normalized arrays (image
divided by its peak, sinogram by the same factor); normalization is the
caller's responsibility and keeps the loss scale independent of the count
level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import container
from .radon import OperatorGeometry, div2d_batch, grad2d_batch

LOG_VAR_MIN, LOG_VAR_MAX = -20.0, 20.0
MEMORY_CHANNELS = 5
E_MODES = ("gradient", "residual-norm")
R_MODES = ("squared-l2", "tv")
TV_SMOOTH_EPS = 1e-6
CHECKPOINT_KIND = "cvae-model"


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over the latent code; arrays shaped (..., d)."""
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.clip(np.asarray(self.log_var, dtype=np.float64),
                               LOG_VAR_MIN, LOG_VAR_MAX)
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log_var must share a shape")

    @property
    def dim(self):
        return self.mean.shape[-1]


@dataclass
class RecurrentState:
    x: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        if self.a.shape[0] != MEMORY_CHANNELS:
            raise ValueError(f"memory must have {MEMORY_CHANNELS} channels")
        if self.x.shape != self.a.shape[1:]:
            raise ValueError("iterate and memory must share spatial dims")


def encoder_graph(in_channels, d_z, width=32, blocks=2, convs_per_block=3):
    """Sinogram encoder: conv/ReLU blocks with average pooling, a global
    spatial mean for input-size flexibility, then a 1x1 head to 2*d_z."""
    graph = []
    c = in_channels
    for _ in range(blocks):
        for _ in range(convs_per_block):
            graph.append(ad.LayerSpec("conv2d", kernel_size=3, in_channels=c, out_channels=width))
            graph.append(ad.LayerSpec("relu"))
            c = width
        graph.append(ad.LayerSpec("avgpool2"))
    graph.append(ad.LayerSpec("global-mean"))
    graph.append(ad.LayerSpec("conv2d", kernel_size=1, in_channels=width,
                              out_channels=2 * d_z, padding="valid"))
    return graph


def recurrent_graph(d_z, width=32):
    """Three convolutions mapping the step's channel stack to (update, memory)."""
    in_ch = recurrent_input_channels(d_z)
    return [
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=in_ch, out_channels=width),
        ad.LayerSpec("relu"),
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=width, out_channels=width),
        ad.LayerSpec("relu"),
        ad.LayerSpec("conv2d", kernel_size=3, in_channels=width,
                      out_channels=MEMORY_CHANNELS + 1),
    ]


def recurrent_input_channels(d_z):
    # iterate + data channel + penalty channel + memory + tiled latent
    return 1 + 1 + 1 + MEMORY_CHANNELS + d_z


@dataclass
class ModelBundle:
    teacher: ad.ParamSet
    student: ad.ParamSet
    recurrent: ad.ParamSet
    geometry: OperatorGeometry
    d_z: int = 6
    K: int = 10
    beta: float = 5e-3
    e_mode: str = "gradient"
    r_mode: str = "squared-l2"

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.e_mode not in E_MODES:
            raise ValueError(f"e_mode must be one of {E_MODES}")
        if self.r_mode not in R_MODES:
            raise ValueError(f"r_mode must be one of {R_MODES}")


def make_bundle(geometry, d_z=6, K=10, beta=5e-3, e_mode="gradient",
                r_mode="squared-l2", width=32, seed=0) -> ModelBundle:
    rng = np.random.default_rng(seed)
    teacher = ad.init_params(encoder_graph(2, d_z, width), rng)
    student = ad.init_params(encoder_graph(1, d_z, width), rng)
    recurrent = ad.init_params(recurrent_graph(d_z, width), rng)
    # zero final layer: decoding starts as the identity on the back-projected
    # x0, so the K compounded refinement steps are stable from the first batch
    recurrent.arrays["layer4/weight"][:] = 0.0
    recurrent.arrays["layer4/bias"][:] = 0.0
    return ModelBundle(teacher=teacher, student=student, recurrent=recurrent,
                       geometry=geometry, d_z=d_z, K=K, beta=beta,
                       e_mode=e_mode, r_mode=r_mode)


# -- encoders -----------------------------------------------------------------

def _encode_t(graph, param_tensors, stack_t, d_z):
    head = ad.apply_graph(graph, param_tensors, stack_t)        # (N, 2*d_z, 1, 1)
    flat = ad.reshape(head, (head.shape[0], 2 * d_z))
    mean_t, logvar_t = ad.split(flat, [d_z, d_z], axis=1)
    return mean_t, _clamp_logvar_t(logvar_t)


def _clamp_logvar_t(t):
    # clip to [LOG_VAR_MIN, LOG_VAR_MAX] via min/max composition that keeps
    # gradients inside the clamp region
    lo = ad.relu(t - LOG_VAR_MIN) + LOG_VAR_MIN
    return LOG_VAR_MAX - ad.relu(LOG_VAR_MAX - lo)


def teacher_encode(teacher: ad.ParamSet, x, y, op, d_z=6, width=32) -> LatentGaussian:
    """q(z | x, y, A): encode the 2-channel stack (A x, y) in sinogram space."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != op.geometry.image_shape:
        raise ValueError(f"image shape {x.shape} does not match operator")
    if y.shape != op.geometry.sinogram_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match operator")
    stack = np.stack([op.apply(x), y])[None]                    # (1, 2, A, B)
    with ad.no_grad():
        mean_t, logvar_t = _encode_t(encoder_graph(2, d_z, width),
                                     {k: ad.Tensor(v) for k, v in teacher.arrays.items()},
                                     ad.Tensor(stack), d_z)
    return LatentGaussian(mean=mean_t.data[0], log_var=logvar_t.data[0])


def student_encode(student: ad.ParamSet, y, d_z=6, width=32) -> LatentGaussian:
    """p(z | y): encode the observation alone."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("expected a 2-D sinogram")
    with ad.no_grad():
        mean_t, logvar_t = _encode_t(encoder_graph(1, d_z, width),
                                     {k: ad.Tensor(v) for k, v in student.arrays.items()},
                                     ad.Tensor(y[None, None]), d_z)
    return LatentGaussian(mean=mean_t.data[0], log_var=logvar_t.data[0])


def sample_latent(g: LatentGaussian, rng) -> np.ndarray:
    """Reparameterized draw z = mean + exp(log_var / 2) * eps."""
    eps = rng.normal(size=g.mean.shape)
    return g.mean + np.exp(0.5 * g.log_var) * eps


def kl_diag_gauss(q: LatentGaussian, p: LatentGaussian) -> float:
    """Closed-form KL(q || p) for diagonal Gaussians; sums over the last axis
    and averages nothing (vector inputs give a scalar, batches a vector)."""
    if q.mean.shape != p.mean.shape:
        raise ValueError("dimension mismatch between q and p")
    term = (np.exp(q.log_var - p.log_var)
            + (p.mean - q.mean) ** 2 / np.exp(p.log_var)
            - 1.0 + p.log_var - q.log_var)
    out = 0.5 * term.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _kl_t(mean_q, logvar_q, mean_p, logvar_p):
    """Tensor-graph KL; returns (N,) per-instance values."""
    diff = mean_p - mean_q
    term = (ad.exp(logvar_q - logvar_p)
            + ad.div(ad.square(diff), ad.exp(logvar_p))
            - 1.0 + logvar_p - logvar_q)
    return ad.mul(ad.tsum(term, axis=1), 0.5)


# -- recurrent refinement -------------------------------------------------------

def _project_t(t, op):
    return ad.linear_map(t, op.apply_batch, op.adjoint_batch)


def _backproject_t(t, op):
    return ad.linear_map(t, op.adjoint_batch, op.apply_batch)


def _data_channel_t(x_t, y_const, op, e_mode):
    residual = _project_t(x_t, op) - y_const
    if e_mode == "gradient":
        return _backproject_t(residual, op)
    # squared residual norm per item, broadcast to a constant image channel
    n, _, h, w = x_t.shape
    sq = ad.tsum(ad.square(residual), axis=(1, 2, 3), keepdims=False)
    return ad.broadcast_to(ad.reshape(sq, (n, 1, 1, 1)), (n, 1, h, w))


def _penalty_channel_t(x_t, r_mode):
    if r_mode == "squared-l2":
        return ad.mul(x_t, 2.0)
    # smoothed total-variation gradient: div(grad x / sqrt(|grad x|^2 + eps))
    g = ad.linear_map(x_t, grad2d_batch, lambda p: -div2d_batch(p))
    mag = ad.sqrt(ad.tsum(ad.square(g), axis=1, keepdims=True) + TV_SMOOTH_EPS)
    field = ad.div(g, ad.broadcast_to(mag, g.shape))
    return ad.linear_map(field, lambda p: -div2d_batch(p), grad2d_batch)


def _step_t(graph, param_tensors, x_t, a_t, y_const, op, z_t, e_mode, r_mode):
    n, _, h, w = x_t.shape
    channels = [x_t, _data_channel_t(x_t, y_const, op, e_mode),
                _penalty_channel_t(x_t, r_mode), a_t]
    if z_t is not None:
        channels.append(ad.tile_latent(z_t, h, w))
    stacked = ad.concat(channels, axis=1)
    out = ad.apply_graph(graph, param_tensors, stacked)
    dx, a_new = ad.split(out, [1, MEMORY_CHANNELS], axis=1)
    return x_t + dx, a_new


def _decode_t(graph, param_tensors, y_const, op, z_t, K, x0_t, e_mode, r_mode):
    n = y_const.shape[0]
    h, w = op.geometry.image_shape
    x_t = x0_t
    a_t = ad.Tensor(np.zeros((n, MEMORY_CHANNELS, h, w)))
    for _ in range(K):
        x_t, a_t = _step_t(graph, param_tensors, x_t, a_t, y_const, op, z_t,
                           e_mode, r_mode)
    return x_t


def recurrent_step(recurrent: ad.ParamSet, state: RecurrentState, y, op, z,
                   e_mode="gradient", r_mode="squared-l2") -> RecurrentState:
    """One refinement of (x, a) given observation y and latent z."""
    z = np.asarray(z, dtype=np.float64)
    graph = recurrent_graph(z.shape[-1])
    with ad.no_grad():
        x_t, a_t = _step_t(graph, {k: ad.Tensor(v) for k, v in recurrent.arrays.items()},
                           ad.Tensor(state.x[None, None]),
                           ad.Tensor(state.a[None]),
                           ad.Tensor(np.asarray(y, dtype=np.float64)[None, None]),
                           op, ad.Tensor(z[None]), e_mode, r_mode)
    return RecurrentState(x=x_t.data[0, 0], a=a_t.data[0])


def decode(recurrent: ad.ParamSet, y, op, z, K=10, x0=None,
           e_mode="gradient", r_mode="squared-l2") -> np.ndarray:
    """Run K refinement steps from x0 (default: back-projected data) with
    zero-initialized memory; returns the final iterate."""
    if K < 1:
        raise ValueError("K must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0 is None:
        x0 = op.adjoint(y)
    graph = recurrent_graph(z.shape[-1])
    with ad.no_grad():
        x_t = _decode_t(graph, {k: ad.Tensor(v) for k, v in recurrent.arrays.items()},
                        ad.Tensor(y[None, None]), op, ad.Tensor(z[None]), K,
                        ad.Tensor(np.asarray(x0, dtype=np.float64)[None, None]),
                        e_mode, r_mode)
    return x_t.data[0, 0]


def decode_batch(recurrent: ad.ParamSet, y, op, z_batch, K=10, x0=None,
                 e_mode="gradient", r_mode="squared-l2") -> np.ndarray:
    """Decode many latent draws against one observation; returns (S, H, W)."""
    y = np.asarray(y, dtype=np.float64)
    z_batch = np.asarray(z_batch, dtype=np.float64)
    s = z_batch.shape[0]
    if x0 is None:
        x0 = op.adjoint(y)
    graph = recurrent_graph(z_batch.shape[-1])
    x0b = np.broadcast_to(x0[None, None], (s, 1) + x0.shape).copy()
    yb = np.broadcast_to(y[None, None], (s, 1) + y.shape).copy()
    with ad.no_grad():
        x_t = _decode_t(graph, {k: ad.Tensor(v) for k, v in recurrent.arrays.items()},
                        ad.Tensor(yb), op, ad.Tensor(z_batch), K, ad.Tensor(x0b),
                        e_mode, r_mode)
    return x_t.data[:, 0]


# -- training objective ----------------------------------------------------------

def loss_minibatch(bundle: ModelBundle, batch, L=1, rng=None):
    """Minibatch objective (minimization form):

        (1/2M) sum_i (1/L) sum_l ||x_i - xhat_(i,l)||^2
            + (beta/M) sum_i KL(q(z|x_i,y_i) || p(z|y_i))

    with xhat decoded from teacher draws via the reparameterization trick.
    Inputs are normalized by each tuple's peak before entering the networks.
    Returns (loss value, {"teacher", "student", "recurrent"} gradient dicts).
    """
    if len(batch) == 0:
        raise ValueError("empty minibatch")
    if L < 1:
        raise ValueError("L must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)

    m = len(batch)
    d_z = bundle.d_z
    t_graph = encoder_graph(2, d_z)
    s_graph = encoder_graph(1, d_z)
    r_graph = recurrent_graph(d_z)
    t_params = bundle.teacher.tensors()
    s_params = bundle.student.tensors()
    r_params = bundle.recurrent.tensors()

    # group items by operator so each group runs batched
    groups = {}
    for item in batch:
        groups.setdefault(id(item.operator), []).append(item)

    total = None
    for items in groups.values():
        op = items[0].operator
        n = len(items)
        xs = np.stack([it.x / it.peak for it in items])[:, None]          # (n,1,H,W)
        ys = np.stack([it.y / it.peak for it in items])[:, None]          # (n,1,A,B)
        y_const = ad.Tensor(ys)
        with ad.no_grad():
            ax = op.apply_batch(xs)
        t_mean, t_logvar = _encode_t(t_graph, t_params,
                                     ad.Tensor(np.concatenate([ax, ys], axis=1)), d_z)
        s_mean, s_logvar = _encode_t(s_graph, s_params, y_const, d_z)

        x0 = ad.Tensor(op.adjoint_batch(ys))
        x_true = ad.Tensor(xs)
        recon = None
        for _ in range(L):
            eps = ad.Tensor(rng.normal(size=(n, d_z)))
            z_t = t_mean + ad.mul(ad.exp(ad.mul(t_logvar, 0.5)), eps)
            x_hat = _decode_t(r_graph, r_params, y_const, op, z_t, bundle.K, x0,
                              bundle.e_mode, bundle.r_mode)
            sq = ad.tsum(ad.square(x_hat - x_true))
            recon = sq if recon is None else recon + sq
        recon = ad.mul(recon, 1.0 / (2.0 * m * L))
        kl = ad.mul(ad.tsum(_kl_t(t_mean, t_logvar, s_mean, s_logvar)),
                    bundle.beta / m)
        part = recon + kl
        total = part if total is None else total + part

    total.backward()
    loss = float(total.data)
    grads = {
        "teacher": {k: _grad_or_zero(t) for k, t in t_params.items()},
        "student": {k: _grad_or_zero(t) for k, t in s_params.items()},
        "recurrent": {k: _grad_or_zero(t) for k, t in r_params.items()},
    }
    return loss, grads


def _grad_or_zero(t):
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# -- checkpoints ------------------------------------------------------------------

def save_bundle(path, bundle: ModelBundle) -> None:
    arrays = {}
    for net, ps in (("teacher", bundle.teacher), ("student", bundle.student),
                    ("recurrent", bundle.recurrent)):
        for k, v in ps.arrays.items():
            arrays[f"{net}/{k}"] = v
    meta = {
        "kind": CHECKPOINT_KIND,
        "d_z": bundle.d_z,
        "K": bundle.K,
        "beta": bundle.beta,
        "e_mode": bundle.e_mode,
        "r_mode": bundle.r_mode,
        "geometry": bundle.geometry.to_dict(),
    }
    container.save_arrays(path, arrays, meta)


def load_bundle(path) -> ModelBundle:
    arrays, meta = container.load_arrays(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise container.ContainerError(
            f"not a model checkpoint (kind={meta.get('kind')!r}): {path}")
    nets = {"teacher": {}, "student": {}, "recurrent": {}}
    for name, arr in arrays.items():
        net, _, key = name.partition("/")
        if net not in nets:
            raise container.ContainerError(f"unexpected array {name!r} in {path}")
        nets[net][key] = arr
    return ModelBundle(
        teacher=ad.ParamSet(nets["teacher"]),
        student=ad.ParamSet(nets["student"]),
        recurrent=ad.ParamSet(nets["recurrent"]),
        geometry=OperatorGeometry.from_dict(meta["geometry"]),
        d_z=int(meta["d_z"]), K=int(meta["K"]), beta=float(meta["beta"]),
        e_mode=meta["e_mode"], r_mode=meta["r_mode"])
