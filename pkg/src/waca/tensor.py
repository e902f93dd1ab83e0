"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive builds its output through :meth:`Tensor._make`,
which records the parents and a closure mapping the output gradient to parent
gradients. :meth:`Tensor.backward` linearizes the recorded graph into a tape
(topological order), walks it once in reverse, then frees it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "concat",
    "conv2d",
    "linear",
    "relu",
    "gelu",
    "sigmoid",
    "global_avg_pool",
    "global_max_pool",
    "channel_pool_spatial",
    "layer_norm_channelwise",
    "grn",
    "resize_bilinear",
    "bilinear_matrix",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional real array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents: Iterable["Tensor"], backward) -> "Tensor":
        """Wrap a forward result; record ``backward`` if any parent needs grads."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        parents = tuple(parents)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        src = self.data.dtype
        return Tensor._make(self.data.astype(dtype), (self,), lambda g: (g.astype(src),))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- elementwise arithmetic ----------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        )

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        x, y = self.data, other.data
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        x, y = self.data, other.data
        return Tensor._make(
            x / y,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
        )

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self.data
        p = float(exponent)
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g / (2.0 * out),))

    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    # -- shape ---------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, index):
        src_shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(src_shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward)

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        src = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def max(self, axis=None, keepdims: bool = False):
        """Maximum; the gradient goes to the first maximal element in row-major order."""
        x = self.data
        if axis is None:
            axes = tuple(range(x.ndim))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
        keep = tuple(a for a in range(x.ndim) if a not in axes)
        moved = x.transpose(keep + axes)
        kept_shape = moved.shape[: len(keep)]
        flat = moved.reshape(kept_shape + (-1,))
        idx = np.argmax(flat, axis=-1)
        vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        out_shape = tuple(1 if a in axes else n for a, n in enumerate(x.shape)) if keepdims else kept_shape
        out = vals.reshape(out_shape)
        inv = tuple(np.argsort(keep + axes))

        def backward(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(kept_shape)[..., None], axis=-1)
            return (gflat.reshape(moved.shape).transpose(inv),)

        return Tensor._make(out, (self,), backward)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` of every reachable leaf that requires gradients."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad:
                    if g is None:
                        g = np.zeros_like(node.data)
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if g is None:
                g = np.zeros_like(node.data)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------------------
# convolution / dense
# ---------------------------------------------------------------------------


def _group_contract(xs: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    """out[n, o, h, w] = sum_c w[o, c] xs[n, c, h, w] within each group."""
    n, cin, h, wd = xs.shape
    cout = w.shape[0]
    if groups == 1:
        return np.tensordot(w, xs, axes=([1], [1])).transpose(1, 0, 2, 3)
    if cin == groups and cout == groups:
        return xs * w[:, 0][None, :, None, None]
    xg = xs.reshape(n, groups, cin // groups, h, wd)
    wg = w.reshape(groups, cout // groups, cin // groups)
    return np.einsum("ngchw,goc->ngohw", xg, wg, optimize=True).reshape(n, cout, h, wd)


def _group_input_grad(g: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    """Transpose of :func:`_group_contract` with respect to ``xs``."""
    n, cout, h, wd = g.shape
    cin = w.shape[1] * groups
    if groups == 1:
        return np.tensordot(w, g, axes=([0], [1])).transpose(1, 0, 2, 3)
    if cin == groups and cout == groups:
        return g * w[:, 0][None, :, None, None]
    gg = g.reshape(n, groups, cout // groups, h, wd)
    wg = w.reshape(groups, cout // groups, cin // groups)
    return np.einsum("ngohw,goc->ngchw", gg, wg, optimize=True).reshape(n, cin, h, wd)


def _group_weight_grad(g: np.ndarray, xs: np.ndarray, groups: int) -> np.ndarray:
    n, cout, h, wd = g.shape
    cin = xs.shape[1]
    if groups == 1:
        return np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
    if cin == groups and cout == groups:
        return (g * xs).sum(axis=(0, 2, 3))[:, None]
    gg = g.reshape(n, groups, cout // groups, h, wd)
    xg = xs.reshape(n, groups, cin // groups, h, wd)
    return np.einsum("ngohw,ngchw->goc", gg, xg, optimize=True).reshape(cout, cin // groups)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if cin % groups or cout % groups:
        raise ShapeError(f"channels (in={cin}, out={cout}) not divisible by groups={groups}")
    if cin_g * groups != cin:
        raise ShapeError(f"weight axis 1 is {cin_g}, expected in_channels/groups = {cin // groups}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias axis 0 is {b.shape}, expected ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wdat = w.data
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x.data, wdat))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + hs : stride, j : j + ws : stride]
            out += _group_contract(xs, wdat[:, :, i, j], groups)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wdat) if w.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gx is not None:
                    gx[:, :, i : i + hs : stride, j : j + ws : stride] += _group_input_grad(g, wdat[:, :, i, j], groups)
                if gw is not None:
                    xs = xp[:, :, i : i + hs : stride, j : j + ws : stride]
                    gw[:, :, i, j] = _group_weight_grad(g, xs, groups)
        if gx is not None and padding:
            gx = gx[:, :, padding : padding + h, padding : padding + wd]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b for x of shape [N, Cin] and w of shape [Cout, Cin]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match out features {w.shape[0]}")
    xd, wdat = x.data, w.data
    out = xd @ wdat.T
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ wdat, g.T @ xd]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._make(out, (x, w, b) if b is not None else (x, w), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# pooling / normalization
# ---------------------------------------------------------------------------


def _check_spatial(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects [N,C,H,W], got {x.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"{op}: empty spatial extent {x.shape[2:]}")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_spatial(x, "global_avg_pool")
    return x.mean(axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    _check_spatial(x, "global_max_pool")
    return x.max(axis=(2, 3))


def channel_pool_spatial(x: Tensor) -> Tensor:
    """Stack the per-pixel channel mean (plane 0) and channel max (plane 1)."""
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError(f"channel_pool_spatial expects [N,C>=1,H,W], got {x.shape}")
    return concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)


def layer_norm_channelwise(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """LayerNorm over the channel axis at every spatial location of NCHW input."""
    xd = x.data
    c = xd.shape[1]
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gam = gamma.data[None, :, None, None]
    out = xhat * gam + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gh = g * gam
        gx = rstd * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).sum(axis=1, keepdims=True) / c)
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward)


def grn(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Global response normalization: x + gamma * (x * n) + beta.

    ``n`` is each channel's spatial L2 norm divided by the mean of those norms
    across channels (plus ``eps``).
    """
    xd = x.data
    c = xd.shape[1]
    gx = np.sqrt((xd * xd).sum(axis=(2, 3), keepdims=True))
    denom = gx.mean(axis=1, keepdims=True) + eps
    nx = gx / denom
    gam = gamma.data[None, :, None, None]
    out = xd + gam * (xd * nx) + beta.data[None, :, None, None]

    def backward(g):
        ggam = (g * xd * nx).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dx = g + gam * nx * g
        p = (g * gam * xd).sum(axis=(2, 3), keepdims=True)  # dL/dn
        dgx = p / denom - (p * gx).sum(axis=1, keepdims=True) / (denom * denom * c)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(gx > 0, dgx / gx, 0.0)
        dx = dx + scale * xd
        return dx, ggam, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """1-D linear interpolation matrix (align_corners=False, edge-clamped)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if (out_h, out_w) == (h, w):
        return x
    rh = bilinear_matrix(h, out_h, x.dtype)
    rw = bilinear_matrix(w, out_w, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", rh, x.data, rw, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", rh, g, rw, optimize=True),)

    return Tensor._make(out, (x,), backward)
