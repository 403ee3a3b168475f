"""Minimal dense-array engine with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every operation applied to tensors
that require gradients records a node holding references to its inputs and a
closure that maps the output gradient to input gradients.  :func:`backward`
orders the reachable nodes topologically (a :class:`Tape`), walks them in
reverse once, and then releases the recorded closures.

Broadcasting follows numpy rules; gradients are summed back to the input
shape.  Gradients accumulate when a tensor feeds several consumers.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeConsumedError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "power",
    "absolute",
    "softplus",
    "sigmoid",
    "silu",
    "clip",
    "elementwise",
    "matmul",
    "conv1d",
    "depthwise_conv1d",
    "reduce",
    "sum",
    "mean",
    "amax",
    "avg_pool",
    "reverse_time",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "unbroadcast",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeConsumedError(RuntimeError):
    pass


class Tensor:
    """Dense array node of the differentiation graph."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_consumed", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self):
        """Gradient array; zeros for a tensor that no backward pass reached."""
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers take the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return _as_tensor(a), _as_tensor(b)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{kind}: incompatible shapes {a.shape} and {b.shape}"
        ) from None


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered list of the nodes reachable from a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.consumed = False

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise TapeConsumedError("tape already consumed by a previous backward pass")
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, seed: np.ndarray) -> None:
        if self.consumed:
            raise TapeConsumedError("tape already consumed by a previous backward pass")
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node._backward is None:
                # leaf: accumulate into .grad
                if g is not None:
                    node._grad = g.copy() if node._grad is None else node._grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
        self.consumed = True


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if loss._consumed:
        raise TapeConsumedError("tape already consumed by a previous backward pass")
    if not loss.requires_grad:
        return
    Tape.from_loss(loss).run(np.asarray(grad, dtype=loss.dtype).reshape(loss.shape))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = x**p
    return _make(out, (a,), lambda g: (g * p * x ** (p - 1),))


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = _as_tensor(a)
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.asarray(np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0), dtype=x.dtype)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    out = x * s
    return _make(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamped."""
    a = _as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x, giving the exact limit 0
    with np.errstate(over="ignore"):
        return np.asarray(1.0 / (1.0 + np.exp(-x)), dtype=x.dtype)


_UNARY = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": absolute,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "silu": silu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting (``a @ b``)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def _pad_amounts(K: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return (K - 1) // 2, K // 2
    if padding == "valid":
        return 0, 0
    if padding == "causal":
        return K - 1, 0
    raise ValueError(f"unknown padding mode {padding!r}")


def conv1d(x, k, bias=None, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` [(B,) C_in, L] with ``k`` [C_out, C_in, K].

    ``padding`` is ``"same"`` (zero padded, output length L), ``"valid"``
    (L - K + 1) or ``"causal"`` (left padded, output length L).
    """
    x, k = _as_tensor(x), _as_tensor(k)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    kd = k.data
    if kd.ndim != 3 or xd.ndim != 3 or kd.shape[1] != xd.shape[1]:
        raise ValueError(f"conv1d: shapes {x.shape} and {k.shape} do not match")
    K = kd.shape[2]
    left, right = _pad_amounts(K, padding)
    L = xd.shape[2]
    if K > L + left + right:
        raise ValueError(f"conv1d: kernel length {K} exceeds padded input length {L + left + right}")
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if left or right else xd
    Lout = xp.shape[2] - K + 1
    # (B, C_in, L', K) windows
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)
    # contract over C_in and K: result (B, L', C_out) -> (B, C_out, L')
    out = np.tensordot(win, kd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    parents = [x, k]
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        gk = gx = gb = None
        if k.requires_grad:
            gk = np.tensordot(g3, win, axes=([0, 2], [0, 2]))  # (C_out, C_in, K)
        if x.requires_grad:
            gwin = np.tensordot(g3, kd, axes=([1], [0]))  # (B, L', C_in, K)
            gxp = np.zeros_like(xp)
            for j in range(K):
                gxp[:, :, j : j + Lout] += gwin[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, left : left + L]
            if squeeze:
                gx = gx[0]
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        res = [gx, gk]
        if bias is not None:
            res.append(gb)
        return tuple(res)

    return _make(np.ascontiguousarray(out), tuple(parents), bw)


def depthwise_conv1d(x, k, bias=None, padding: str = "causal") -> Tensor:
    """Per-channel cross-correlation: ``x`` [(B,) C, L], ``k`` [C, K]."""
    x, k = _as_tensor(x), _as_tensor(k)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    kd = k.data
    if kd.ndim != 2 or kd.shape[0] != xd.shape[1]:
        raise ValueError(f"depthwise_conv1d: shapes {x.shape} and {k.shape} do not match")
    K = kd.shape[1]
    left, right = _pad_amounts(K, padding)
    L = xd.shape[2]
    if K > L + left + right:
        raise ValueError(f"depthwise_conv1d: kernel length {K} exceeds padded input length")
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if left or right else xd
    Lout = xp.shape[2] - K + 1
    out = np.zeros(xd.shape[:2] + (Lout,), dtype=np.result_type(xd, kd))
    for j in range(K):
        out += kd[None, :, j : j + 1] * xp[:, :, j : j + Lout]
    parents = [x, k]
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data[None, :, None]
        parents.append(bias)
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = g[None] if squeeze else g
        gx = gk = gb = None
        if k.requires_grad:
            gk = np.stack(
                [(g3 * xp[:, :, j : j + Lout]).sum(axis=(0, 2)) for j in range(K)], axis=1
            )
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(K):
                gxp[:, :, j : j + Lout] += g3 * kd[None, :, j : j + 1]
            gx = gxp[:, :, left : left + L]
            if squeeze:
                gx = gx[0]
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        res = [gx, gk]
        if bias is not None:
            res.append(gb)
        return tuple(res)

    return _make(out, tuple(parents), bw)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    if any(shape[ax] == 0 for ax in axes):
        raise ValueError("reduction over an empty axis")
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    if n == 0:
        raise ValueError("reduction over an empty axis")
    s = sum(a, axes, keepdims)
    return mul(s, np.asarray(1.0 / n, dtype=a.dtype))


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient goes to the first maximal element."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ValueError("reduction over an empty axis")
    x = a.data
    out = x.max(axis=axes, keepdims=True)
    mask = x == out
    # keep only the first maximal position along the flattened reduced axes
    moved = np.moveaxis(mask, axes, tuple(range(-len(axes), 0)))
    flat = moved.reshape(moved.shape[: moved.ndim - len(axes)] + (-1,))
    first = np.zeros_like(flat)
    np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
    mask = np.moveaxis(first.reshape(moved.shape), tuple(range(-len(axes), 0)), axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * mask,)

    res = out if keepdims else np.squeeze(out, axis=axes)
    return _make(np.asarray(res), (a,), bw)


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return sum(x, axis, keepdims)
    if kind == "mean":
        return mean(x, axis, keepdims)
    if kind == "max":
        return amax(x, axis, keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


def avg_pool(x) -> Tensor:
    """Average over the time (last) axis."""
    return mean(x, axis=-1)


def reverse_time(x) -> Tensor:
    x = _as_tensor(x)
    return _make(np.ascontiguousarray(x.data[..., ::-1]), (x,), lambda g: (g[..., ::-1],))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(a.data[idx]), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)
