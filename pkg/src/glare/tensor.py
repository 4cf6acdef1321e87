"""Dense tensors with reverse-mode automatic differentiation.

Every forward op computes its value with numpy, checks it is finite, and, if
any input requires gradients, records a closure that maps the output gradient
to input gradients.  ``Tensor.backward`` walks the recorded graph once in
reverse topological order, accumulating gradients additively.

Broadcasting is deliberately narrow: binary ops accept equal shapes, a
scalar operand (size 1), or a per-channel operand whose only non-unit axis
is the channel axis (axis 1 of ``B x C x H x W``, axis 0 of ``C x H x W``).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "tensor",
    "zeros",
    "ones",
    "get_dtype",
    "precision",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "abs",
    "square",
    "clamp",
    "power",
    "softplus",
    "silu",
    "leaky_relu",
    "elementwise",
    "matmul",
    "conv2d",
    "resample",
    "bilinear_sample",
    "reduce",
    "sum",
    "mean",
    "stop_gradient",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "softmax",
    "logabsdet",
]


class TensorError(ValueError):
    """Raised for shape errors, domain violations, and non-finite values."""


_state = threading.local()


def get_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Switch the working float type (float32 for training, float64 for checks)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TensorError(f"unsupported dtype {dtype}")
    old = get_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or get_dtype(), copy=True)
        if not np.isfinite(arr).all():
            raise TensorError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _make(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str = "op",
    ) -> "Tensor":
        """Wrap an op result, recording ``backward`` when a parent needs gradients.

        ``backward`` receives the output gradient and returns one gradient (or
        None) per parent, each already shaped like that parent.
        """
        if not np.isfinite(data).all():
            raise TensorError(f"{op}: produced NaN or Inf")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar.

        Repeated calls accumulate into existing leaf gradients.
        """
        if grad is None:
            if self.data.size != 1:
                raise TensorError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# -- broadcasting ------------------------------------------------------------


def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    if a == b or int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return True
    if len(a) != len(b) or len(a) < 3:
        return False
    channel = len(a) - 3
    small = a if int(np.prod(a)) < int(np.prod(b)) else b
    if any(n != 1 for i, n in enumerate(small) if i != channel):
        return False
    return a[channel] == b[channel]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary_inputs(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _as_tensor(b, a)
    else:
        b = _as_tensor(b)
        a = _as_tensor(a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise TensorError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")
    return a, b


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return Tensor._make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return Tensor._make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    return Tensor._make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    if np.any(b.data == 0):
        raise TensorError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._make(out, (a, b), backward, "div")


def _unary(x, value: np.ndarray, dfdx: Callable[[], np.ndarray], op: str) -> Tensor:
    return Tensor._make(value, (x,), lambda g: (g * dfdx(),), op)


def neg(x: Tensor) -> Tensor:
    return Tensor._make(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.isfinite(out).all():
        raise TensorError("exp: overflow")
    return _unary(x, out, lambda: out, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise TensorError("log: non-positive argument")
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data, "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, out, lambda: 1.0 - out * out, "tanh")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return _unary(x, out, lambda: out * (1.0 - out), "sigmoid")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    # subgradient at 0 is 0
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data), "abs")


def square(x: Tensor) -> Tensor:
    return _unary(x, x.data * x.data, lambda: 2.0 * x.data, "square")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)

    def mask():
        m = np.ones_like(x.data)
        if lo is not None:
            m[x.data < lo] = 0
        if hi is not None:
            m[x.data > hi] = 0
        return m

    return _unary(x, out, mask, "clamp")


def power(x: Tensor, p: float) -> Tensor:
    if np.any(x.data < 0) or (p < 1 and np.any(x.data == 0)):
        raise TensorError("power: argument outside domain")
    out = x.data**p
    return _unary(x, out, lambda: p * x.data ** (p - 1), "power")


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    return _unary(x, out, lambda: _sigmoid_np(v), "softplus")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _unary(x, x.data * s, lambda: s * (1.0 + x.data * (1.0 - s)), "silu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    v = x.data
    return _unary(x, np.where(v > 0, v, slope * v), lambda: np.where(v > 0, 1.0, slope).astype(v.dtype), "leaky_relu")


_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "abs": abs,
    "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Dispatch by name; ``clamp`` takes ``lo``/``hi``."""
    if kind in _BINARY:
        if b is None:
            raise TensorError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](_as_tensor(a))
    if kind == "clamp":
        return clamp(_as_tensor(a), lo, hi)
    raise TensorError(f"unknown elementwise kind {kind!r}")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes are batch axes and must agree exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def logabsdet(m: Tensor) -> Tensor:
    """log|det M| for a square matrix; gradient is M^-T."""
    sign, value = np.linalg.slogdet(m.data.astype(np.float64))
    if sign == 0 or not np.isfinite(value):
        raise TensorError("logabsdet: singular matrix")
    return Tensor._make(
        np.asarray(value, dtype=m.dtype),
        (m,),
        lambda g: (g * np.linalg.inv(m.data.astype(np.float64)).T.astype(m.dtype),),
        "logabsdet",
    )


# -- convolution & resampling ------------------------------------------------


def _pad_mode(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    width = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    return np.pad(x, width, mode="edge" if mode == "replicate" else "constant")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0, pad_mode: str = "zeros") -> Tensor:
    """Cross-correlation of ``B x Cin x H x W`` with ``Cout x Cin x k x k``.

    ``pad_mode`` is ``"zeros"`` or ``"replicate"``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise TensorError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, k, k2 = weight.shape
    if Ci != C or k != k2 or k % 2 == 0:
        raise TensorError(f"conv2d: weight {weight.shape} incompatible with input {x.shape}")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise TensorError(f"conv2d: output extent not integral for H={H}, W={W}, k={k}, stride={stride}, pad={pad}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise TensorError("conv2d: empty output")

    xp = _pad_mode(x.data, pad, pad_mode)
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(B, C * k * k, Ho * Wo)
    wm = weight.data.reshape(O, C * k * k)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data.reshape(1, O, 1)
    out = out.reshape(B, O, Ho, Wo)

    def backward(g):
        gm = g.reshape(B, O, Ho * Wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, gm).reshape(B, C, k, k, Ho, Wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
            if pad == 0:
                gx = gxp
            elif pad_mode == "replicate":
                gx = _fold_replicate(gxp, pad)
            else:
                gx = gxp[:, :, pad:-pad, pad:-pad]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def _fold_replicate(gxp: np.ndarray, pad: int) -> np.ndarray:
    g = gxp.copy()
    g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
    g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
    g = g[:, :, pad:-pad, :]
    g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
    g[:, :, :, -pad - 1] += g[:, :, :, -pad:].sum(axis=3)
    return g[:, :, :, pad:-pad]


def resample(x: Tensor, mode: str) -> Tensor:
    """``nearest_up2`` doubles H and W; ``avg_down2`` takes 2x2 means."""
    if x.ndim < 2:
        raise TensorError("resample: need at least 2 spatial axes")
    H, W = x.shape[-2:]
    lead = x.shape[:-2]
    if mode == "nearest_up2":
        out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

        def backward(g):
            return (g.reshape(*lead, H, 2, W, 2).sum(axis=(-3, -1)),)

    elif mode == "avg_down2":
        if H % 2 or W % 2:
            raise TensorError(f"resample: avg_down2 needs even extents, got {H}x{W}")
        out = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

        def backward(g):
            return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    else:
        raise TensorError(f"resample: unknown mode {mode!r}")
    return Tensor._make(out, (x,), backward, "resample")


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample ``x`` at continuous pixel positions with border clamping.

    ``x`` is ``C x H x W`` or ``B x C x H x W``; ``coords`` is ``2 x ...`` (or
    ``B x 2 x ...``) with channel 0 the row and channel 1 the column.  The
    output takes the spatial shape of ``coords``.
    """
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3 or coords.shape[0] != 2:
            raise TensorError(f"bilinear_sample: bad shapes {x.shape}, {coords.shape}")
        x4 = x.data[None]
        c4 = coords.data[None]
    else:
        if coords.ndim < 3 or coords.shape[:2] != (x.shape[0], 2):
            raise TensorError(f"bilinear_sample: bad shapes {x.shape}, {coords.shape}")
        x4, c4 = x.data, coords.data
    B, C, H, W = x4.shape
    out_spatial = c4.shape[2:]
    cy = c4[:, 0].reshape(B, -1)
    cx = c4[:, 1].reshape(B, -1)
    N = cy.shape[1]

    yc = np.clip(cy, 0, H - 1)
    xc = np.clip(cx, 0, W - 1)
    y0 = np.minimum(np.floor(yc), max(H - 2, 0)).astype(np.int64)
    x0 = np.minimum(np.floor(xc), max(W - 2, 0)).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (yc - y0).astype(x4.dtype)
    wx = (xc - x0).astype(x4.dtype)

    flat = x4.reshape(B, C, H * W)

    def gather(yy, xx):
        idx = (yy * W + xx)[:, None, :]
        return np.take_along_axis(flat, np.broadcast_to(idx, (B, C, N)), axis=2)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    wy_, wx_ = wy[:, None, :], wx[:, None, :]
    top = v00 + wx_ * (v01 - v00)
    bot = v10 + wx_ * (v11 - v10)
    out = top + wy_ * (bot - top)
    out_full = out.reshape(B, C, *out_spatial)
    if not batched:
        out_full = out_full[0]

    def backward(g):
        g = g.reshape(B, C, N) if batched else g[None].reshape(B, C, N)
        gx = gc = None
        if x.requires_grad:
            acc = np.zeros(B * C * H * W, dtype=np.float64)
            base = (np.arange(B)[:, None] * C + np.arange(C)[None, :])[:, :, None] * (H * W)
            for yy, xx, w in (
                (y0, x0, (1 - wy_) * (1 - wx_)),
                (y0, x1, (1 - wy_) * wx_),
                (y1, x0, wy_ * (1 - wx_)),
                (y1, x1, wy_ * wx_),
            ):
                idx = base + (yy * W + xx)[:, None, :]
                acc += np.bincount(idx.ravel(), weights=(g * w).ravel(), minlength=acc.size)
            gx = acc.reshape(x4.shape).astype(x4.dtype)
            if not batched:
                gx = gx[0]
        if coords.requires_grad:
            dy = ((bot - top) * g).sum(axis=1)
            dx = (((1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)) * g).sum(axis=1)
            dy = np.where((cy >= 0) & (cy <= H - 1), dy, 0)
            dx = np.where((cx >= 0) & (cx <= W - 1), dx, 0)
            gc = np.stack([dy.reshape(B, *out_spatial), dx.reshape(B, *out_spatial)], axis=1).astype(c4.dtype)
            if not batched:
                gc = gc[0]
        return gx, gc

    return Tensor._make(out_full, (x, coords), backward, "bilinear_sample")


# -- reductions & shape ops --------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise TensorError(f"reduce: axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    if kind == "sum":
        out = x.data.sum(axis=ax, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=ax, keepdims=keepdims)
        scale = 1.0 / max(1, int(np.prod([x.shape[a] for a in ax])))
    else:
        raise TensorError(f"reduce: unknown kind {kind!r}")
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax) if ax else g
        return (np.broadcast_to(g * scale, x.shape).astype(x.dtype),)

    return Tensor._make(out, (x,), backward, kind)


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axes, keepdims)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor._make(x.data, (), lambda g: (), "stop_gradient")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise TensorError(f"reshape: {err}") from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Iterable[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise TensorError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as err:
        raise TensorError(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, xs, backward, "concat")


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g) if _is_fancy(idx) else gx.__setitem__(idx, g)
        return (gx,)

    return Tensor._make(np.array(out, copy=True), (x,), backward, "getitem")


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows ``table[indices]``; gradients scatter-add back into the table."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise TensorError("take_rows: index out of range")
    out = table.data[indices]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices.ravel(), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return Tensor._make(out, (table,), backward, "take_rows")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``x.data``."""
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = float(fn().data.sum())
            flat[i] = old - eps
            lo = float(fn().data.sum())
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
    return g


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    The error for one input is ``max|analytic - numeric| / max(max|numeric|, 1e-8)``;
    the return value is the maximum over ``inputs``.  Run under
    ``precision(np.float64)``.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numeric_grad(fn, t, eps)
        scale = max(float(np.max(np.abs(numeric))), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    return worst
