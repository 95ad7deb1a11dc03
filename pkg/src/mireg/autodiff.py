"""Minimal reverse-mode automatic differentiation on numpy arrays.

The engine is tape-free in the bookkeeping sense: every operation links its
output tensor to its parents together with a backward closure, and
``Tensor.backward()`` replays the recorded graph in reverse topological
order. float32 is the working precision; building a graph from float64
arrays gives a shadow graph used by the finite-difference gradient checks.

Only the operations the registration and similarity networks need are
provided; there is no general broadcasting. Scalars (Python numbers) are
accepted by the arithmetic operators and treated as constants.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data prep)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    # cheap screen first: a finite sum proves all-finite for realistic
    # magnitudes, and NaN/Inf always poison the sum
    if np.isfinite(data.sum()):
        return
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A numpy array with optional gradient tracking.

    ``grad`` is None until ``backward()`` reaches the tensor; callers are
    responsible for zeroing gradients between steps (accumulation is the
    default, matching the optimizer contract).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- reverse pass ----------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Only valid on scalar tensors. Gradients accumulate into existing
        ``grad`` buffers.
        """
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            return
        order = self._toposort()
        self._accumulate(np.ones((), dtype=self.data.dtype))
        for node in order:
            if node._backward_fn is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)

    def _toposort(self) -> list["Tensor"]:
        # Iterative DFS: integration loops build chains deep enough to make
        # recursion risky.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        order.reverse()
        return order

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ConfigurationError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def mean(self):
        return mean(self)

    def sum(self):
        return tsum(self)

    def reshape(self, shape):
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable tensor. Names must be unique within one model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward
        out._op = op
    return out


def _match_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ConfigurationError(
            f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}"
        )


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        return _node(t.data + s, "add", (t,), lambda g: (g,))
    _match_shapes(a, b, "add")
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    if isinstance(b, (int, float)):
        return _node(a.data - b, "sub", (a,), lambda g: (g,))
    if isinstance(a, (int, float)):
        return _node(a - b.data, "sub", (b,), lambda g: (-g,))
    _match_shapes(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        return _node(t.data * s, "mul", (t,), lambda g: (g * s,))
    _match_shapes(a, b, "mul")
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (g * b.data, g * a.data))


def div(a, b):
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    if isinstance(a, (int, float)):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a / b.data
        return _node(out, "div", (b,), lambda g: (-g * out / b.data,))
    _match_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _node(out, "div", (a, b),
                 lambda g: (g / b.data, -g * out / b.data))


def neg(a):
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (g * (0.5 / out),))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    """log(1 + exp(x)), evaluated without overflow for large |x|."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return _node(out.astype(x.dtype), "softplus", (a,),
                 lambda g: ((g * sig).astype(x.dtype),))


def square(a):
    return _node(a.data * a.data, "square", (a,), lambda g: (g * (2.0 * a.data),))


def clip_min(a, lo: float):
    """max(x, lo) with subgradient 0 on the clipped region."""
    keep = a.data > lo
    out = np.where(keep, a.data, lo).astype(a.data.dtype)
    return _node(out, "clip_min", (a,),
                 lambda g: (np.where(keep, g, 0.0).astype(a.data.dtype),))


def leaky_relu(a, negative_slope: float = 0.2):
    """Leaky rectifier; the default slope is used everywhere in the nets."""
    slope = np.where(a.data >= 0, a.data.dtype.type(1.0),
                     a.data.dtype.type(negative_slope))
    return _node(a.data * slope, "leaky_relu", (a,), lambda g: (g * slope,))


# -- reductions ------------------------------------------------------------


def mean(a):
    n = a.data.size
    out = a.data.mean(dtype=a.data.dtype)
    return _node(out, "mean", (a,),
                 lambda g: (np.full(a.data.shape, g / n, dtype=a.data.dtype),))


def tsum(a):
    out = a.data.sum(dtype=a.data.dtype)
    return _node(out, "sum", (a,),
                 lambda g: (np.full(a.data.shape, g, dtype=a.data.dtype),))


def log_mean_exp(a):
    """Numerically stable log(mean(exp(x))) over all elements."""
    m = a.data.max()
    w = np.exp(a.data - m)
    s = w.sum(dtype=a.data.dtype)
    out = np.asarray(m + np.log(s / a.data.size), dtype=a.data.dtype)

    def backward(g):
        return (g * (w / s),)

    return _node(out, "log_mean_exp", (a,), backward)


# -- structural ops ---------------------------------------------------------


def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape
    return _node(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(old),))


def gather(a, index):
    """Indexed read from the flattened tensor: out = a.flat[index].

    The backward pass scatter-adds into the source, so gradients reach the
    gathered values (the index itself is not differentiable).
    """
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ConfigurationError("gather: index must be an integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.size):
        raise ConfigurationError("gather: index out of range")
    flat_idx = idx.ravel()
    out = a.data.ravel()[flat_idx].reshape(idx.shape)

    def backward(g):
        scattered = np.bincount(flat_idx, weights=g.ravel(), minlength=a.data.size)
        return (scattered.reshape(a.data.shape).astype(a.data.dtype),)

    return _node(out, "gather", (a,), backward)


def concat_channels(tensors: Sequence[Tensor]):
    """Concatenate along axis 0 (the channel axis)."""
    tensors = tuple(tensors)
    tails = {t.data.shape[1:] for t in tensors}
    if len(tails) != 1:
        raise ConfigurationError(f"concat_channels: trailing shapes differ: {tails}")
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _node(np.concatenate([t.data for t in tensors], axis=0),
                 "concat_channels", tensors, backward)


def spatial_diff(a, axis: int):
    """Forward difference x[i+1]-x[i] along ``axis`` (length shrinks by 1)."""
    if a.data.shape[axis] < 2:
        raise ConfigurationError("spatial_diff: axis too short")
    out = np.diff(a.data, axis=axis)
    hi = [slice(None)] * a.data.ndim
    lo = [slice(None)] * a.data.ndim
    hi[axis] = slice(1, None)
    lo[axis] = slice(None, -1)
    hi, lo = tuple(hi), tuple(lo)

    def backward(g):
        gx = np.zeros(a.data.shape, dtype=a.data.dtype)
        gx[hi] += g
        gx[lo] -= g
        return (gx,)

    return _node(out, "spatial_diff", (a,), backward)


# -- convolutions and resampling ---------------------------------------------


def conv1x1(x, w, b=None):
    """Per-voxel linear map over channels: x (Ci, *S), w (Co, Ci), b (Co,)."""
    if x.data.ndim < 2 or w.data.ndim != 2 or x.data.shape[0] != w.data.shape[1]:
        raise ConfigurationError(
            f"conv1x1: incompatible shapes x{x.data.shape} w{w.data.shape}"
        )
    spatial = x.data.shape[1:]
    co = w.data.shape[0]
    x2d = np.ascontiguousarray(x.data.reshape(x.data.shape[0], -1))
    out = w.data @ x2d
    parents: tuple[Tensor, ...]
    if b is not None:
        if b.data.shape != (co,):
            raise ConfigurationError("conv1x1: bias shape mismatch")
        out += b.data[:, None]
        parents = (x, w, b)
    else:
        parents = (x, w)

    def backward(g):
        g2d = g.reshape(co, -1)
        gx = (w.data.T @ g2d).reshape(x.data.shape) if x.requires_grad else None
        gw = g2d @ x2d.T if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2d.sum(axis=1) if b.requires_grad else None
        return gx, gw, gb

    return _node(out.reshape((co,) + spatial), "conv1x1", parents, backward)


def conv2d(x, w, b=None, stride: int = 1):
    """k x k same-padded 2D convolution, stride 1 or 2.

    x (Ci, H, W), w (Co, Ci, k, k) with odd k, b (Co,). Stride 2 requires
    even spatial dims and halves them (zero padding k//2).
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ConfigurationError("conv2d: expected x (Ci,H,W) and w (Co,Ci,k,k)")
    ci, h, wd = x.data.shape
    co, ci_w, k, k2 = w.data.shape
    if ci != ci_w or k != k2 or k % 2 == 0:
        raise ConfigurationError(
            f"conv2d: incompatible shapes x{x.data.shape} w{w.data.shape}"
        )
    if stride not in (1, 2):
        raise ConfigurationError("conv2d: stride must be 1 or 2")
    if stride == 2 and (h % 2 or wd % 2):
        raise ConfigurationError("conv2d: stride 2 requires even spatial dims")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(ci * k * k, ho * wo)
    w_mat = w.data.reshape(co, ci * k * k)
    out = (w_mat @ cols).reshape(co, ho, wo)
    parents: tuple[Tensor, ...]
    if b is not None:
        if b.data.shape != (co,):
            raise ConfigurationError("conv2d: bias shape mismatch")
        out = out + b.data[:, None, None]
        parents = (x, w, b)
    else:
        parents = (x, w)

    def backward(g):
        g2 = g.reshape(co, ho * wo)
        gx = None
        if x.requires_grad:
            gcols = (w_mat.T @ g2).reshape(ci, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki:ki + stride * ho:stride,
                        kj:kj + stride * wo:stride] += gcols[:, ki, kj]
            gx = gxp[:, pad:pad + h, pad:pad + wd]
        gw = (g2 @ cols.T).reshape(w.data.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=1) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, "conv2d", parents, backward)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling of a (C, H, W) tensor."""
    if x.data.ndim != 3:
        raise ConfigurationError("upsample2x: expected (C,H,W)")
    c, h, w = x.data.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _node(out, "upsample2x", (x,), backward)


def _linear_stretch_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # half-pixel-aligned factor-2 interpolation with replicated borders:
    # out[2i] = 0.75 a[i] + 0.25 a[i-1], out[2i+1] = 0.75 a[i] + 0.25 a[i+1]
    a = np.moveaxis(a, axis, 0)
    lo = np.concatenate([a[:1], a[:-1]], axis=0)
    hi = np.concatenate([a[1:], a[-1:]], axis=0)
    out = np.empty((2 * a.shape[0],) + a.shape[1:], dtype=a.dtype)
    out[0::2] = 0.75 * a + 0.25 * lo
    out[1::2] = 0.75 * a + 0.25 * hi
    return np.moveaxis(out, 0, axis)


def _linear_stretch_axis_T(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    ge, go = g[0::2], g[1::2]
    out = 0.75 * (ge + go)
    out[:-1] += 0.25 * ge[1:]
    out[0] += 0.25 * ge[0]
    out[1:] += 0.25 * go[:-1]
    out[-1] += 0.25 * go[-1]
    return np.moveaxis(out, 0, axis)


def upsample2x_linear(x):
    """Bilinear 2x upsampling of a (C, H, W) tensor.

    Unlike the nearest variant this produces fields whose discrete
    gradient energy matches a natively smooth field, so downstream
    smoothness penalties keep their intended scale.
    """
    if x.data.ndim != 3:
        raise ConfigurationError("upsample2x_linear: expected (C,H,W)")
    out = _linear_stretch_axis(_linear_stretch_axis(x.data, 1), 2)

    def backward(g):
        return (_linear_stretch_axis_T(_linear_stretch_axis_T(g, 2), 1),)

    return _node(out.astype(x.data.dtype), "upsample2x_linear", (x,), backward)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int,
                   negative_slope: float = 0.2, dtype=np.float32) -> np.ndarray:
    """Kaiming fan-in init with the leaky-rectifier gain."""
    gain = np.sqrt(2.0 / (1.0 + negative_slope ** 2))
    return (rng.standard_normal(shape) * gain / np.sqrt(fan_in)).astype(dtype)


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Adam with bias correction over a list of Parameters."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4,
                 beta1: float = 0.99, beta2: float = 0.999, eps: float = 1e-8):
        params = list(params)
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ConfigurationError("Adam: parameter names must be unique")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise ValueError(f"Adam.step: missing gradients for {missing}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- gradient checking --------------------------------------------------------


def finite_difference_grad(fn, inputs: Sequence[np.ndarray], index: int,
                           h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar fn w.r.t. inputs[index].

    The computation runs in float64 regardless of the caller's dtype so the
    check stays trustworthy.
    """
    arrs = [np.asarray(a, dtype=np.float64).copy() for a in inputs]
    target = arrs[index]
    grad = np.zeros_like(target)
    flat = target.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(*arrs))
        flat[i] = orig - h
        fm = float(fn(*arrs))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_check(fn, inputs: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Max relative error between backprop and finite-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. Both gradients are evaluated on
    float64 shadow tensors.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
               for a in inputs]
    out = fn(*tensors)
    out.backward()

    def as_scalar(*arrs):
        with no_grad():
            return fn(*[Tensor(a) for a in arrs]).data

    worst = 0.0
    for i, t in enumerate(tensors):
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = finite_difference_grad(as_scalar, [t.data for t in tensors], i, h=h)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
