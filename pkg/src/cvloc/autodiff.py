"""Minimal reverse-mode autodiff engine on dense float32 arrays.

Tensors wrap numpy arrays. Each differentiable operation records a backward
closure; nodes carry a serial number, so creation order is the tape and
`backward` simply walks it in reverse. All storage and accumulation is
float32 and every op allocates fresh arrays, which keeps the engine easy to
reason about at desk scale.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_grad_enabled = True
_serial = 0
_dtype = np.float32


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def double_precision():
    """Run the engine in float64 inside the block.

    Gradient-check machinery only: float32 finite differences at small steps
    drown in rounding noise. Production paths stay float32.
    """
    global _dtype
    prev = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    """Dense float32 array with an optional backward closure.

    Treat tensors as immutable once created: ops never write into their
    inputs, and the optimizer returns fresh parameter tensors.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_serial")

    def __init__(self, data, requires_grad: bool = False):
        global _serial
        self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        _serial += 1
        self._serial = _serial

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division not supported; divide by scalars")
        return mul(self, 1.0 / float(other))

    def sum(self):
        return t_sum(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    """Build the output node, recording the closure only when it can matter."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape))
    else:
        t.grad += g


def zero_grads(params):
    """Drop accumulated gradients on a dict of parameter tensors."""
    for p in params.values():
        p.grad = None


# -- elementwise and shape ops ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g if a.shape == out_data.shape else g.sum())
        _accum(b, g if b.shape == out_data.shape else g.sum())

    return _result(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        _accum(a, ga if a.shape == out_data.shape else ga.sum())
        _accum(b, gb if b.shape == out_data.shape else gb.sum())

    return _result(out_data, (a, b), backward)


def t_sum(x: Tensor) -> Tensor:
    out_data = x.data.sum()

    def backward(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _result(out_data, (x,), backward)


def mean(x: Tensor) -> Tensor:
    return mul(t_sum(x), 1.0 / x.size)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _result(out_data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        _accum(x, g * (1.0 - t * t))

    return _result(t, (x,), backward)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def backward(g):
        _accum(x, g * e)

    return _result(e, (x,), backward)


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def backward(g):
        _accum(x, g / x.data)

    return _result(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _result(out_data, (x,), backward)


def transpose_axes(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        _accum(x, g.transpose(inv))

    return _result(out_data, (x,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        slices = np.moveaxis(g, axis, 0)
        for t, gs in zip(tensors, slices):
            _accum(t, gs)

    return _result(out_data, tensors, backward)


def concat_vec(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise DimensionError("concat_vec expects 1-D tensors")
    na = a.data.shape[0]
    out_data = np.concatenate([a.data, b.data])

    def backward(g):
        _accum(a, g[:na])
        _accum(b, g[na:])

    return _result(out_data, (a, b), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two (C, H, W) tensors along channels, order (a, b)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError("concat_channels expects (C, H, W) tensors")
    if a.data.shape[1:] != b.data.shape[1:]:
        raise DimensionError(
            f"spatial sizes differ: {a.data.shape[1:]} vs {b.data.shape[1:]}"
        )
    ca = a.data.shape[0]
    out_data = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        _accum(a, g[:ca])
        _accum(b, g[ca:])

    return _result(out_data, (a, b), backward)


def slice_index(x: Tensor, i: int) -> Tensor:
    """x[i] along axis 0; gradient scattered back to that row."""
    out_data = np.asarray(x.data[i]).copy()

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[i] = g
        _accum(x, buf)

    return _result(out_data, (x,), backward)


def crop_spatial(x: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Spatial window of a (C, H, W) tensor; gradient zero-padded back."""
    out_data = np.ascontiguousarray(x.data[:, r0:r1, c0:c1])

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[:, r0:r1, c0:c1] = g
        _accum(x, buf)

    return _result(out_data, (x,), backward)


def channel_max(x: Tensor) -> Tensor:
    """Max over the channel axis of (C, H, W); gradient to the first argmax."""
    idx = x.data.argmax(axis=0)
    out_data = x.data.max(axis=0)

    def backward(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, idx[None], g[None], axis=0)
        _accum(x, buf)

    return _result(out_data, (x,), backward)


def broadcast_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Tile a (d,) vector to (d, h, w); gradient sums over positions."""
    out_data = np.ascontiguousarray(np.broadcast_to(v.data[:, None, None], (v.size, h, w)))

    def backward(g):
        _accum(v, g.sum(axis=(1, 2)))

    return _result(out_data, (v,), backward)


def bias_channels(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to a (C, H, W) tensor."""
    if b.data.shape != (x.data.shape[0],):
        raise DimensionError(f"bias shape {b.data.shape} vs channels {x.data.shape[0]}")
    out_data = x.data + b.data[:, None, None]

    def backward(g):
        _accum(x, g)
        _accum(b, g.sum(axis=(1, 2)))

    return _result(out_data, (x, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim == 1 and b.data.ndim == 1:
        if a.shape != b.shape:
            raise DimensionError(f"dot shapes differ: {a.shape} vs {b.shape}")
        out_data = a.data @ b.data

        def backward(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _result(out_data, (a, b), backward)

    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul on shapes {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    if b.data.ndim == 1:

        def backward(g):
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)

    else:

        def backward(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    return _result(out_data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map w @ x + b for a 1-D input."""
    if x.data.ndim != 1 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[0]:
        raise DimensionError(f"linear shapes: x{x.shape}, w{w.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise DimensionError(f"linear bias shape {b.shape} vs out dim {w.data.shape[0]}")
    out_data = w.data @ x.data + b.data

    def backward(g):
        _accum(x, w.data.T @ g)
        _accum(w, np.outer(g, x.data))
        _accum(b, g)

    return _result(out_data, (x, w, b), backward)


def softmax_flat(x: Tensor) -> Tensor:
    """Exp-normalize jointly over every element, stabilized by max-subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_flat received NaN input")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    y = e / e.sum()

    def backward(g):
        _accum(x, y * (g - (g * y).sum()))

    return _result(y, (x,), backward)


def logsumexp(x: Tensor) -> Tensor:
    """Scalar log-sum-exp over all elements, stabilized by max-subtraction."""
    m = x.data.max()
    e = np.exp(x.data - m)
    s = e.sum()
    out_data = m + np.log(s)

    def backward(g):
        _accum(x, (e / s) * g)

    return _result(out_data, (x,), backward)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-D tensors.

    A zero-norm input yields a constant 0 with no gradient path, so early
    degenerate descriptors cannot poison training with NaNs.
    """
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim shapes: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        return Tensor(0.0)
    s = float(a.data @ b.data) / (na * nb)

    def backward(g):
        _accum(a, g * (b.data / (na * nb) - s * a.data / (na * na)))
        _accum(b, g * (a.data / (na * nb) - s * b.data / (nb * nb)))

    return _result(s, (a, b), backward)


# -- convolution machinery ----------------------------------------------------


def _im2col(xp, k, stride, oh, ow):
    c = xp.shape[0]
    sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, k, k, oh, ow),
        strides=(sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * k * k, oh * ow)


def _pad(x, pad):
    if pad == 0:
        return x
    c, h, w = x.shape
    buf = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    buf[:, pad : pad + h, pad : pad + w] = x
    return buf


def _conv_out_size(h, w, k, stride, pad):
    # Standard floor sizing: windows that do not fully fit are dropped.
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"kernel {k} does not fit input {h}x{w} with stride={stride}, pad={pad}"
        )
    return oh, ow


def _conv_fwd(x, w, stride, pad):
    co, ci, k, _ = w.shape
    oh, ow = _conv_out_size(x.shape[1], x.shape[2], k, stride, pad)
    cols = _im2col(_pad(x, pad), k, stride, oh, ow)
    out = (w.reshape(co, -1) @ cols).reshape(co, oh, ow)
    return out, cols


def _col2im(dcols, ci, k, stride, pad, h, w, oh, ow):
    hp, wp = h + 2 * pad, w + 2 * pad
    dxp = np.zeros((ci, hp, wp), dtype=dcols.dtype)
    dcols = dcols.reshape(ci, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                :, i, j
            ]
    if pad:
        return np.ascontiguousarray(dxp[:, pad : hp - pad, pad : wp - pad])
    return dxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (C_in, H, W) with an (C_out, C_in, k, k) kernel."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(f"conv2d shapes: input {x.shape}, kernel {w.shape}")
    co, ci, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square with odd side, got {k}x{k2}")
    if ci != x.data.shape[0]:
        raise DimensionError(f"conv2d channels: input {x.data.shape[0]}, kernel {ci}")
    h, wd = x.data.shape[1], x.data.shape[2]
    out_data, cols = _conv_fwd(x.data, w.data, stride, pad)
    oh, ow = out_data.shape[1], out_data.shape[2]

    def backward(g):
        g_mat = g.reshape(co, -1)
        if w.requires_grad:
            _accum(w, (g_mat @ cols.T).reshape(w.data.shape))
        if x.requires_grad:
            dcols = w.data.reshape(co, -1).T @ g_mat
            _accum(x, _col2im(dcols, ci, k, stride, pad, h, wd, oh, ow))

    return _result(out_data, (x, w), backward)


def upsample2(x: Tensor, w: Tensor) -> Tensor:
    """Learned 2x upsampling: transposed convolution, kernel 4, stride 2, pad 1.

    Weights are shaped (C_in, C_out, 4, 4). Forward is the input-gradient of
    the matching strided convolution, so the conv helpers are shared.
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[2:] != (4, 4):
        raise DimensionError(f"upsample2 shapes: input {x.shape}, weights {w.shape}")
    ci, co = w.data.shape[0], w.data.shape[1]
    if ci != x.data.shape[0]:
        raise DimensionError(f"upsample2 channels: input {x.data.shape[0]}, weights {ci}")
    k, stride, pad = 4, 2, 1
    h, wd = x.data.shape[1], x.data.shape[2]
    oh, ow = 2 * h, 2 * wd

    dcols = w.data.reshape(ci, -1).T @ x.data.reshape(ci, -1)
    out_data = _col2im(dcols, co, k, stride, pad, oh, ow, h, wd)

    def backward(g):
        if x.requires_grad:
            gx, _ = _conv_fwd(g, w.data, stride, pad)
            _accum(x, gx)
        if w.requires_grad:
            cols = _im2col(_pad(g, pad), k, stride, h, wd)
            _accum(w, (x.data.reshape(ci, -1) @ cols.T).reshape(w.data.shape))

    return _result(out_data, (x, w), backward)


def pool_max2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first
    (row-major) maximal element of the window."""
    if x.data.ndim != 3:
        raise DimensionError(f"pool_max2 expects (C, H, W), got {x.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"pool_max2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = (
        x.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    out_data = win.max(axis=-1)

    def backward(g):
        buf = np.zeros_like(win)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        _accum(
            x,
            buf.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),
        )

    return _result(out_data, (x,), backward)


# -- backward pass -------------------------------------------------------------


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf, then free the graph."""
    if loss.data.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None:
        return

    nodes = []
    seen = set()
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack_.extend(t._parents)

    nodes.sort(key=lambda t: t._serial, reverse=True)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in nodes:
        if node.grad is not None:
            node._backward(node.grad)
    for node in nodes:
        node._parents = ()
        node._backward = None


# -- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    """Optimizer state for a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update. Returns (new params dict, state); inputs stay untouched."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    new_params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} vs param {p.data.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = Tensor(p.data - update, requires_grad=True)
    return new_params, state


def uniform_init(rng, shape, fan_in, scale: float = 1.0) -> Tensor:
    """Parameter tensor drawn uniformly from +-scale/sqrt(fan_in)."""
    lim = scale / math.sqrt(fan_in)
    return Tensor(rng.uniform(-lim, lim, size=shape).astype(np.float32), requires_grad=True)
