"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the segmentation network needs are provided. Every op
returns a fresh array (no aliasing views), checks that its output is finite,
and, when any input requires a gradient, records a node carrying a global
sequence number. ``backward`` replays the reachable nodes in exact reverse
execution order.
"""

from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SEQ = itertools.count()
_STATE = threading.local()

TNSR_MAGIC = b"TNSR0001"


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class _DecisionLog:
    """Discrete choices made during a forward pass (ReLU gates, top-k picks)."""

    def __init__(self):
        self.entries: list[np.ndarray] = []
        self.replaying = False
        self.pos = 0


def decide(value: np.ndarray) -> np.ndarray:
    """Pass a discrete decision through the active log.

    Outside :func:`grad_check` this is the identity. During a check the base
    forward records each decision and the perturbed forwards replay them, so
    finite differences stay on the smooth piece containing the base point.
    """
    log = getattr(_STATE, "decisions", None)
    if log is None:
        return value
    if not log.replaying:
        log.entries.append(value)
        return value
    if log.pos >= len(log.entries):
        raise RuntimeError("perturbed forward made more discrete decisions than the base forward")
    out = log.entries[log.pos]
    log.pos += 1
    if np.shape(out) != np.shape(value):
        raise RuntimeError("recorded decision has a different shape")
    return out


class _Node:
    __slots__ = ("seq", "parents", "backward", "op")

    def __init__(self, parents, backward, op):
        self.seq = next(_SEQ)
        self.parents = parents
        self.backward = backward
        self.op = op


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._node = _Node(tuple(parents), backward, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Recorded differentiable ops reachable from a root, in execution order."""

    def __init__(self, root: Tensor):
        nodes: dict[int, tuple[Tensor, _Node]] = {}
        stack = [root]
        seen: set[int] = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                nodes[t._node.seq] = (t, t._node)
                stack.extend(t._node.parents)
        self.entries = [nodes[k] for k in sorted(nodes)]

    @property
    def ops(self) -> list[str]:
        return [node.op for _, node in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed_grad}
        if root._node is None and root.requires_grad:
            _accumulate(root, seed_grad)
            return
        for out, node in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for parent, pg in zip(node.parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    _accumulate(parent, pg)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Gradients accumulate; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape(loss).replay(loss, np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x: Tensor) -> Tensor:
    pos = decide(x.data > 0)
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated stably."""
    out = np.logaddexp(0.0, x.data)
    sig = np.exp(x.data - out)
    return _make(out, (x,), lambda g: (g * sig,), "softplus")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape).copy()
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], dtype=np.float64)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), bw, "getitem")


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis with integer indices (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, axis, 0).reshape((indices.size,) + moved.shape[1:])
        np.add.at(moved, indices.reshape(-1), gm)
        return (full,)

    return _make(out, (x,), bw, "take")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(xs), bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % (xs[0].ndim + 1)
    out = np.stack([x.data for x in xs], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(out, tuple(xs), bw, "stack")


def pad2d(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int], mode: str = "zeros") -> Tensor:
    """Pad the two spatial axes of a ``(..., H, W, C)`` tensor.

    ``mode`` is ``"zeros"`` or ``"edge"`` (replicate border values).
    """
    (t, b), (l, r) = pad_h, pad_w
    if t == b == l == r == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 3) + [(t, b), (l, r), (0, 0)]
    H, W = x.shape[-3], x.shape[-2]
    if mode == "zeros":
        out = np.pad(x.data, widths)

        def bw(g):
            return (g[..., t:t + H, l:l + W, :].copy(),)
    elif mode == "edge":
        out = np.pad(x.data, widths, mode="edge")
        rows = np.clip(np.arange(-t, H + b), 0, H - 1)
        cols = np.clip(np.arange(-l, W + r), 0, W - 1)

        def bw(g):
            gr = np.zeros(g.shape[:-3] + (H,) + g.shape[-2:])
            np.add.at(gr, (Ellipsis, rows, slice(None), slice(None)), g)
            gc = np.zeros(g.shape[:-3] + (H, W, g.shape[-1]))
            np.add.at(gc, (Ellipsis, cols, slice(None)), gr)
            return (gc,)
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return _make(out, (x,), bw, "pad2d")


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` spatial block of a ``(..., H, W, C)`` tensor."""
    if x.shape[-3] == h and x.shape[-2] == w:
        return x
    out = x.data[..., :h, :w, :].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., :h, :w, :] = g
        return (full,)

    return _make(out, (x,), bw, "crop2d")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` over the last axis; weight is ``(Cin, Cout)``."""
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[-1],))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1, pad_mode: str = "zeros") -> Tensor:
    """Cross-correlation of a ``(..., H, W, Cin)`` input with a ``(Kh, Kw, Cin, Cout)`` kernel."""
    if kernel.ndim != 4:
        raise ValueError("kernel must be Kh x Kw x Cin x Cout")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel sides must be odd")
    if x.ndim < 3 or x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if padding:
        x = pad2d(x, (padding, padding), (padding, padding), mode=pad_mode)
    H, W = x.shape[-3], x.shape[-2]
    ho = (H - dilation * (kh - 1) - 1) // stride + 1
    wo = (W - dilation * (kw - 1) - 1) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output size is not positive")
    xd, kd = x.data, kernel.data
    lead = xd.shape[:-3]
    taps = []
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            taps.append((i, j, (Ellipsis, slice(r0, r0 + stride * (ho - 1) + 1, stride),
                                slice(c0, c0 + stride * (wo - 1) + 1, stride), slice(None))))
    out = np.zeros(lead + (ho, wo, cout))
    for i, j, sl in taps:
        out += xd[sl] @ kd[i, j]

    def bw(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernel.requires_grad else None
        g2 = g.reshape(-1, cout)
        for i, j, sl in taps:
            if gx is not None:
                gx[sl] += g @ kd[i, j].T
            if gk is not None:
                gk[i, j] = xd[sl].reshape(-1, cin).T @ g2
        return gx, gk

    res = _make(out, (x, kernel), bw, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------------------
# normalization, softmax and friends
# ---------------------------------------------------------------------------


def normalize(x: Tensor, axes: tuple[int, ...], eps: float) -> Tensor:
    """Zero-mean unit-variance over ``axes`` (biased variance, eps inside the sqrt)."""
    axes = _norm_axes(axes, x.ndim)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), bw, "normalize")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return add(mul(normalize(x, (-1,), eps), gain), bias)


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """GroupNorm on ``(B, H, W, C)`` maps."""
    B, H, W, C = x.shape
    if C % groups:
        raise ValueError("channels not divisible by groups")
    g = reshape(x, (B, H, W, groups, C // groups))
    g = normalize(g, (1, 2, 4), eps)
    return add(mul(reshape(g, (B, H, W, C)), gain), bias)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """``x / (||x|| + eps)`` over the last axis; zero vectors map to zero."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    d = n + eps
    out = x.data / d

    def bw(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, dot / (safe * d * d), 0.0)
        return (g / d - x.data * coef,)

    return _make(out, (x,), bw, "l2_normalize")


def roll2d(x: Tensor, dy: int, dx: int) -> Tensor:
    """Cyclic shift of the spatial axes of ``(..., H, W, C)``: out[i, j] = x[i - dy, j - dx]."""
    H, W = x.shape[-3], x.shape[-2]
    dy, dx = dy % H, dx % W
    if dy == 0 and dx == 0:
        return _make(x.data.copy(), (x,), lambda g: (g,), "roll2d")
    out = np.roll(x.data, (dy, dx), axis=(-3, -2))
    return _make(out, (x,), lambda g: (np.roll(g, (-dy, -dx), axis=(-3, -2)),), "roll2d")


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Linear interpolation weights for align_corners=False resizing by an integer factor."""
    n_out = n_in * factor
    A = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(A, (rows, lo), 1.0 - frac)
    np.add.at(A, (rows, hi), frac)
    return A


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear resize of ``(..., h, w, C)`` by an integer factor (align_corners=False)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    h, w = x.shape[-3], x.shape[-2]
    Ah, Aw = _interp_matrix(h, factor), _interp_matrix(w, factor)
    out = np.einsum("ph,...hwc,qw->...pqc", Ah, x.data, Aw, optimize=True)

    def bw(g):
        return (np.einsum("ph,...pqc,qw->...hwc", Ah, g, Aw, optimize=True),)

    return _make(out, (x,), bw, "upsample")


# ---------------------------------------------------------------------------
# verification and fixtures
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               indices: Sequence[tuple[int, ...]] | None = None,
               freeze_decisions: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``indices`` restricts the check to a subset of coordinates.

    With ``freeze_decisions`` the ReLU gates and other discrete choices of the
    base forward are replayed in the perturbed forwards. Without it, a
    pre-activation within ``eps`` of zero makes the central difference
    straddle a kink and measure an average slope instead of the derivative.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    log = _DecisionLog() if freeze_decisions else None
    prev = getattr(_STATE, "decisions", None)
    _STATE.decisions = log
    try:
        probe = Tensor(base.copy(), requires_grad=True)
        out = fn(probe)
        backward(out)
        analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
        if log is not None:
            log.replaying = True
        if indices is None:
            indices = list(np.ndindex(base.shape))

        def evaluate(arr):
            if log is not None:
                log.pos = 0
            val = fn(Tensor(arr)).item()
            if log is not None and log.pos != len(log.entries):
                raise RuntimeError("perturbed forward made fewer discrete decisions than the base forward")
            return val

        worst = 0.0
        with no_grad():
            for idx in indices:
                xp = base.copy()
                xp[idx] += eps
                fp = evaluate(xp)
                xp[idx] -= 2 * eps
                fm = evaluate(xp)
                numeric = (fp - fm) / (2 * eps)
                err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    finally:
        _STATE.decisions = prev
    return worst


def save_tensor(path, t) -> None:
    arr = np.array(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    header = TNSR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != TNSR_MAGIC:
        raise ValueError(f"{path}: bad tensor magic")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 8)
    end = 12 + 4 * rank
    if len(raw) < end:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    count = int(np.prod(dims)) if rank else 1
    if len(raw) != end + 8 * count:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype="<f8", offset=end, count=count).reshape(dims).astype(np.float64)
