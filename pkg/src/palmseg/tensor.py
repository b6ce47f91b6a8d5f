"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while gradients are enabled is
stamped with a monotonically increasing sequence number.  ``backward``
collects the operations reachable from the output and replays their
backward rules in strictly decreasing sequence order, i.e. in the exact
reverse of execution order.

Training runs in float32.  Wrapping code in ``precision(np.float64)``
makes every tensor created inside the block 64-bit, which is what the
finite-difference checker relies on.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError

__all__ = [
    "Tensor",
    "precision",
    "default_dtype",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "relu",
    "sigmoid",
    "softmax_spatial",
    "maxpool2",
    "upsample2",
    "concat_channels",
    "reshape",
    "log",
    "clamp",
    "tensor_sum",
    "tensor_mean",
]


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True
        self.counter = itertools.count()


_state = _State()


def default_dtype() -> np.dtype:
    return _state.dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD.

    Args:
        data: Anything ``np.asarray`` accepts.
        requires_grad: Whether ``backward`` should populate ``grad``.
        dtype: Storage dtype. Defaults to the current ``precision``.
        name: Optional label, used in optimizer error messages.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _state.dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in execution_order(self)[::-1]:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
        if self._backward is None and self.requires_grad:
            self.grad = grad.copy() if self.grad is None else self.grad + grad

    # arithmetic, with numpy broadcasting
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def execution_order(root: Tensor) -> list[Tensor]:
    """Operations reachable from ``root``, sorted by execution sequence."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._seq = next(_state.counter)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    return _result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0
    return _result(np.where(gate, x.data, 0).astype(x.dtype), (x,), lambda g: (g * gate,))


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only, so neither tail overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


# reductions and shape

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two NCHW tensors along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"concat_channels expects NCHW inputs, got {a.shape} and {b.shape}")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise DimensionError(f"concat_channels: N/H/W mismatch between {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca].copy(), g[:, ca:].copy()),
    )


# spatial operations

def softmax_spatial(x: Tensor) -> Tensor:
    """Softmax over the H*W positions of each single-channel sample."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"softmax_spatial expects (N,1,H,W), got {x.shape}")
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        gf = g.reshape(n, -1)
        return (((gf - (gf * y).sum(axis=1, keepdims=True)) * y).reshape(x.shape),)

    return _result(y.reshape(x.shape), (x,), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first element in row-major order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2 expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial extent, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    if x.ndim != 4:
        raise DimensionError(f"upsample2 expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, H', W', kH, kW) strided view; no copy
    s0, s1, s2, s3 = xp.strides
    shape = (xp.shape[0], xp.shape[1], ho, wo, kh, kw)
    return np.lib.stride_tricks.as_strided(xp, shape, (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=a.dtype)
    out[:, :, p : p + h, p : p + w] = a
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of an NCHW input with an (Cout, Cin, kH, kW) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise DimensionError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extent must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise DimensionError(f"conv2d: invalid padding={padding} / stride={stride}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: padded input {h}x{w}+2*{padding} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    xp = _pad(x.data, padding) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    if kh == 1 and kw == 1:
        k2 = kernel.data[:, :, 0, 0]
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.matmul(k2, cols.reshape(n, cin, ho * wo)).reshape(n, cout, ho, wo)
    else:
        cols = _windows(xp, kh, kw, stride, ho, wo)
        out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if kh == 1 and kw == 1:
            g3 = g.reshape(n, cout, ho * wo)
            gk = np.matmul(g3, cols.reshape(n, cin, ho * wo).transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
            gc = np.matmul(k2.T, g3).reshape(n, cin, ho, wo)
            gxp = np.zeros_like(xp)
            gxp[:, :, ::stride, ::stride][:, :, :ho, :wo] = gc
        else:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            # (N, H', W', Cin, kH, kW)
            gcols = np.tensordot(g, kernel.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gk.astype(kernel.dtype), gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward)
