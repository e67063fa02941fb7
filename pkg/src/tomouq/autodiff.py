"""Minimal array-valued reverse-mode differentiation.

A `Tensor` wraps a float64 ndarray and records, per operation, a closure
that scatters the output gradient back to its parents (micrograd style,
but at array granularity so convolutions stay vectorized). Only the layer
kinds the learned components need are provided: conv2d, relu, avgpool2,
global-mean and affine, plus the elementwise/structural primitives used
to assemble losses.

Image tensors are (N, C, H, W); dense tensors are (N, D). Everything is
float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


class no_grad:
    """Context manager disabling tape construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad and _grad_enabled
        self.grad = None
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor; seeds with `grad` (default 1)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match output {self.data.shape}")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not (req and _grad_enabled):
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(p for p in parents if p.requires_grad),
                  backward=backward)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def square(a):
    a = _as_tensor(a)

    def backward(g):
        a._accum(2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(0.5 * g / out_data)

    return _make(out_data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)

    def backward(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        a._accum(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def softplus(a):
    """log(1 + exp(x)), numerically stable for large |x|."""
    a = _as_tensor(a)
    out_data = np.where(a.data > 30.0, a.data, np.log1p(np.exp(np.minimum(a.data, 30.0))))

    def backward(g):
        a._accum(g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), backward)


# -- reductions / structure ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = _as_tensor(a)
    in_shape = a.data.shape

    def backward(g):
        a._accum(g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def broadcast_to(a, shape):
    a = _as_tensor(a)

    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def concat(parts, axis):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return _make(out_data, tuple(parts), backward)


def split(a, sizes, axis):
    """Split along `axis` into consecutive chunks of the given sizes."""
    a = _as_tensor(a)
    if sum(sizes) != a.data.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.data.shape[axis]}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accum(full)

        outs.append(_make(a.data[idx].copy(), (a,), backward))
    return outs


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def linear_map(a, fwd, adj, name="linear_map"):
    """Apply a linear operator given as a (forward, adjoint) pair of
    ndarray functions; the backward pass is exactly the adjoint."""
    a = _as_tensor(a)

    def backward(g):
        a._accum(adj(g))

    return _make(fwd(a.data), (a,), backward)


def tile_latent(z, height, width):
    """(N, D) -> (N, D, H, W) constant spatial tiling."""
    z = _as_tensor(z)
    n, d = z.data.shape

    def backward(g):
        z._accum(g.sum(axis=(2, 3)))

    data = np.broadcast_to(z.data[:, :, None, None], (n, d, height, width)).copy()
    return _make(data, (z,), backward)


# -- spatial layers -----------------------------------------------------------

def _conv2d_backward_w(g2, cols):
    # g2: (N, O, HW), cols: (N, CKK, HW)
    return np.einsum("nop,ncp->oc", g2, cols)


def conv2d(x, w, b, padding="same"):
    """2-D convolution, stride 1. x: (N,C,H,W), w: (O,C,k,k), b: (O,).

    `padding="same"` zero-pads so spatial dims are preserved (odd kernels);
    `padding="valid"` is used for 1x1 heads where no padding is needed.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    n, c, h, width = x.data.shape
    o, c2, kh, kw = w.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    if kh != kw:
        raise ValueError("conv2d requires square kernels")
    if padding == "same":
        if kh % 2 == 0:
            raise ValueError("same-padding conv2d requires odd kernels")
        p = kh // 2
    elif padding == "valid":
        p = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))       # (N,C,OH,OW,k,k)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    wmat = w.data.reshape(o, c * kh * kw)
    out_data = (wmat[None] @ cols).reshape(n, o, oh, ow) + b.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        if w.requires_grad:
            w._accum(_conv2d_backward_w(g2, cols).reshape(o, c, kh, kw))
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (wmat.T[None] @ g2).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + oh, j : j + ow] += gcols[:, :, i, j]
            x._accum(gxp[:, :, p : p + h, p : p + width] if p else gxp)

    return _make(out_data, (x, w, b), backward)


def avgpool2(x):
    """2x2 average pooling with stride 2; odd trailing rows/cols are dropped."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    he, we = (h // 2) * 2, (w // 2) * 2
    xc = x.data[:, :, :he, :we]
    out_data = 0.25 * (xc[:, :, 0::2, 0::2] + xc[:, :, 0::2, 1::2]
                       + xc[:, :, 1::2, 0::2] + xc[:, :, 1::2, 1::2])

    def backward(g):
        gx = np.zeros_like(x.data)
        for di in (0, 1):
            for dj in (0, 1):
                gx[:, :, di:he:2, dj:we:2] += 0.25 * g
        x._accum(gx)

    return _make(out_data, (x,), backward)


def global_mean(x):
    """(N,C,H,W) -> (N,C,1,1) spatial mean."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        x._accum(np.broadcast_to(g / (h * w), x.data.shape).copy())

    return _make(out_data, (x,), backward)


def affine(x, w, b):
    """(N, Din) @ (Din, Dout) + (Dout,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    out_data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    return _make(out_data, (x, w, b), backward)


# -- layer specs, parameters, graphs ------------------------------------------

LAYER_KINDS = ("conv2d", "relu", "avgpool2", "global-mean", "affine")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential graph. Only the fields relevant to `kind`
    are consulted."""
    kind: str
    kernel_size: int = 3
    in_channels: int = 0
    out_channels: int = 0
    padding: str = "same"
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.padding == "same" and self.kernel_size % 2 == 0:
                raise ValueError("same-padding conv2d requires an odd kernel")
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("conv2d needs positive channel counts")
        if self.kind == "affine" and (self.in_features < 1 or self.out_features < 1):
            raise ValueError("affine needs positive feature counts")


class ParamSet:
    """Named parameter arrays with per-array ADAM slots."""

    def __init__(self, arrays: dict):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.m = {k: np.zeros_like(v) for k, v in self.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.arrays.items()}
        self.step = 0

    def names(self):
        return sorted(self.arrays)

    def tensors(self):
        """Fresh leaf tensors for one forward pass; gradients land on them."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.arrays.items()}

    def copy(self):
        ps = ParamSet({k: v.copy() for k, v in self.arrays.items()})
        ps.m = {k: v.copy() for k, v in self.m.items()}
        ps.v = {k: v.copy() for k, v in self.v.items()}
        ps.step = self.step
        return ps

    def num_parameters(self):
        return sum(v.size for v in self.arrays.values())


def init_params(graph, rng, prefix="layer"):
    """He-uniform fan-in init for conv/affine weights, zero biases."""
    arrays = {}
    for i, spec in enumerate(graph):
        if spec.kind == "conv2d":
            fan_in = spec.in_channels * spec.kernel_size ** 2
            limit = math.sqrt(6.0 / fan_in)
            arrays[f"{prefix}{i}/weight"] = rng.uniform(
                -limit, limit, size=(spec.out_channels, spec.in_channels,
                                     spec.kernel_size, spec.kernel_size))
            arrays[f"{prefix}{i}/bias"] = np.zeros(spec.out_channels)
        elif spec.kind == "affine":
            limit = math.sqrt(6.0 / spec.in_features)
            arrays[f"{prefix}{i}/weight"] = rng.uniform(
                -limit, limit, size=(spec.in_features, spec.out_features))
            arrays[f"{prefix}{i}/bias"] = np.zeros(spec.out_features)
    return ParamSet(arrays)


def apply_graph(graph, param_tensors, x, prefix="layer"):
    """Chain a sequential graph over tensor `x` using named parameter tensors."""
    t = _as_tensor(x)
    for i, spec in enumerate(graph):
        if spec.kind == "conv2d":
            t = conv2d(t, param_tensors[f"{prefix}{i}/weight"],
                       param_tensors[f"{prefix}{i}/bias"], padding=spec.padding)
        elif spec.kind == "relu":
            t = relu(t)
        elif spec.kind == "avgpool2":
            t = avgpool2(t)
        elif spec.kind == "global-mean":
            t = global_mean(t)
        elif spec.kind == "affine":
            t = affine(t, param_tensors[f"{prefix}{i}/weight"],
                       param_tensors[f"{prefix}{i}/bias"])
    return t


@dataclass
class Tape:
    input: Tensor
    output: Tensor
    param_tensors: dict
    consumed: bool = False


def forward(graph, params: ParamSet, x):
    """Run a sequential graph; returns (output array, tape for backward)."""
    inp = Tensor(x, requires_grad=True)
    pt = params.tensors()
    out = apply_graph(graph, pt, inp)
    return out.data.copy(), Tape(input=inp, output=out, param_tensors=pt)


def backward(tape: Tape, output_gradient):
    """Reverse-mode gradients for a recorded forward pass.

    Returns (param gradients dict, input gradient). A tape can be consumed
    only once; reusing it raises.
    """
    if tape.consumed:
        raise ValueError("tape already consumed by a previous backward call")
    output_gradient = np.asarray(output_gradient, dtype=np.float64)
    if output_gradient.shape != tape.output.data.shape:
        raise ValueError(
            f"output gradient shape {output_gradient.shape} does not match "
            f"forward output {tape.output.data.shape}")
    tape.output.backward(output_gradient)
    tape.consumed = True
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in tape.param_tensors.items()}
    input_grad = tape.input.grad
    if input_grad is None:
        input_grad = np.zeros_like(tape.input.data)
    return grads, input_grad


def adam_step(params: ParamSet, grads: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard ADAM update with bias correction; mutates and returns `params`."""
    if set(grads) != set(params.arrays):
        raise ValueError("gradient names do not match parameter names")
    params.step += 1
    t = params.step
    for k in params.arrays:
        g = grads[k]
        if g.shape != params.arrays[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        params.m[k] = beta1 * params.m[k] + (1 - beta1) * g
        params.v[k] = beta2 * params.v[k] + (1 - beta2) * g * g
        mhat = params.m[k] / (1 - beta1 ** t)
        vhat = params.v[k] / (1 - beta2 ** t)
        params.arrays[k] -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


def gradcheck(graph, params: ParamSet, x, tolerance=1e-4, rng=None, max_coords=4, h=1e-5):
    """Compare reverse-mode parameter gradients against central finite
    differences of a fixed random projection of the output.

    Subsamples up to `max_coords` coordinates per parameter array. Returns
    a report dict with the max relative error and pass/fail.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    proj = rng.normal(size=_forward_shape(graph, params, x))

    def loss_value():
        out, _ = forward(graph, params, x)
        return float((out * proj).sum())

    out, tape = forward(graph, params, x)
    grads, _ = backward(tape, proj)

    worst = 0.0
    details = []
    for name in params.names():
        arr = params.arrays[name]
        flat = arr.reshape(-1)
        n_coords = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            step = h * max(1.0, abs(orig))
            flat[idx] = orig + step
            f_plus = loss_value()
            flat[idx] = orig - step
            f_minus = loss_value()
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2 * step)
            an = grads[name].reshape(-1)[idx]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, rel)
            details.append((name, int(idx), an, fd, rel))
    return {"max_rel_error": worst, "passed": worst < tolerance, "details": details}


def _forward_shape(graph, params, x):
    with no_grad():
        out = apply_graph(graph, {k: Tensor(v) for k, v in params.arrays.items()}, Tensor(x))
    return out.data.shape
