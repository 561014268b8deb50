"""Small reverse-mode autodiff over dense numpy tensors.

Only what the toy depth networks and the attacks need: strided 3x3 / 1x1
convolutions with zero padding, nearest 2x upsampling, a handful of
pointwise ops and a global mean.  Every op returns a new :class:`Tensor`
that remembers its parents and a closure mapping the output gradient to
input gradients.  :func:`backward` orders the graph topologically and runs
the closures in exact reverse order.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype of newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf",
                 _check: bool = True):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or (op == "leaf" and arr.dtype != default_dtype()):
            arr = arr.astype(default_dtype())
        if _check and not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite values entering tensor '{name or op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar, handy in tests and loss code
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __truediv__(self, other):
        return div_elementwise(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(inputs: Sequence[Tensor], kind: str):
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NumericsError(f"non-finite input to {kind}")


def _make(data, parents: Sequence[Tensor], backward_fn, kind: str) -> Tensor:
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (),
                  _backward=backward_fn if track else None, op=kind, _check=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    _check_finite([x], "relu")
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.data.dtype)
    return _make(out, [x], lambda g: (g * pos,), "relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    _check_finite([x], "elu")
    pos = x.data > 0
    neg_part = alpha * np.expm1(np.minimum(x.data, 0))
    out = np.where(pos, x.data, neg_part).astype(x.data.dtype)

    def bw(g):
        return (g * np.where(pos, 1, neg_part + alpha).astype(g.dtype),)

    return _make(out, [x], bw, "elu")


def sigmoid(x: Tensor) -> Tensor:
    _check_finite([x], "sigmoid")
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)
    return _make(out, [x], lambda g: (g * out * (1 - out),), "sigmoid")


def abs_(x: Tensor) -> Tensor:
    _check_finite([x], "abs")
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), [x], lambda g: (g * sgn,), "abs")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    _check_finite([x], "clamp")
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _make(out, [x], lambda g: (g * inside,), "clamp")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    _check_finite([x], "mul_scalar")
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), [x], lambda g: (g * c,), "mul_scalar")


def add_scalar(x: Tensor, c: float) -> Tensor:
    _check_finite([x], "add_scalar")
    return _make(x.data + x.data.dtype.type(c), [x], lambda g: (g,), "add_scalar")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite([a, b], "add")
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, [a, b],
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_finite([a, b], "sub")
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, [a, b],
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite([a, b], "mul")
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, [a, b],
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_finite([a, b], "div_elementwise")
    _broadcast_shape(a, b, "div_elementwise")
    if np.any(b.data == 0):
        raise NumericsError("division by zero in div_elementwise")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, [a, b], bw, "div_elementwise")


# ---------------------------------------------------------------- reductions


def mean_all(x: Tensor) -> Tensor:
    _check_finite([x], "mean_all")
    n = x.data.size
    m = np.mean(x.data, dtype=np.float64)
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        return (np.full(shape, float(g) / n, dtype=dtype),)

    return _make(np.asarray(m), [x], bw, "mean_all")


def sum_all(x: Tensor) -> Tensor:
    _check_finite([x], "sum_all")
    s = np.sum(x.data, dtype=np.float64)
    shape, dtype = x.shape, x.data.dtype
    return _make(np.asarray(s), [x], lambda g: (np.full(shape, float(g), dtype=dtype),), "sum_all")


# ---------------------------------------------------------------- layout


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    _check_finite(tensors, "concat_channels")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(out, tensors, bw, "concat_channels")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), [x], lambda g: (g.reshape(old),), "reshape")


def take_batch(x: Tensor, sl: slice) -> Tensor:
    """Slice along the leading axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _make(x.data[sl], [x], bw, "take_batch")


def nearest_upsample2x(x: Tensor) -> Tensor:
    _check_finite([x], "nearest_upsample2x")
    if x.data.ndim != 4:
        raise ShapeError(f"nearest_upsample2x expects [N,C,H,W], got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, [x], bw, "nearest_upsample2x")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero padding k//2 (odd square kernels).

    x: [N,C,H,W], w: [O,C,k,k], b: [O].  Products are accumulated in float64
    and the result is stored in x's dtype.
    """
    parents = [x, w] + ([b] if b is not None else [])
    _check_finite(parents, "conv2d")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    if h % stride or wd % stride:
        raise ShapeError(f"conv2d: spatial size {(h, wd)} not divisible by stride {stride}")
    p = k // 2
    ho, wo = h // stride, wd // stride
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    w64 = w.data.astype(np.float64)
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    taps = [(i, j) for i in range(k) for j in range(k)]

    def window(arr, i, j):
        return arr[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]

    for i, j in taps:
        out += np.einsum("oc,nchw->nohw", w64[:, :, i, j], window(xp, i, j), optimize=True)
    if b is not None:
        out += b.data.astype(np.float64)[None, :, None, None]
    dtype = x.data.dtype

    def bw(g):
        g64 = g.astype(np.float64)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w64)
        for i, j in taps:
            window(gxp, i, j)[...] += np.einsum("oc,nohw->nchw", w64[:, :, i, j], g64, optimize=True)
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g64, window(xp, i, j), optimize=True)
        gx = gxp[:, :, p:p + h, p:p + wd].astype(dtype)
        grads = [gx, gw.astype(w.data.dtype)]
        if b is not None:
            grads.append(g64.sum(axis=(0, 2, 3)).astype(b.data.dtype))
        return tuple(grads)

    return _make(out.astype(dtype), parents, bw, "conv2d")


_OPS = {
    "conv2d": conv2d,
    "nearest_upsample2x": nearest_upsample2x,
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "add": add,
    "mul_scalar": mul_scalar,
    "concat_channels": lambda *ts: concat_channels(ts),
    "mean_all": mean_all,
    "abs": abs_,
    "sub": sub,
    "div_elementwise": div_elementwise,
    "mul": mul,
    "clamp": clamp,
    "add_scalar": add_scalar,
    "sum_all": sum_all,
}

OP_KINDS = tuple(_OPS)


def forward_op(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Apply the op named ``kind``; keyword params go straight to it."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ConfigError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------- backward


class Graph:
    """Topologically ordered view of everything a scalar loss depends on."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        # iterative DFS; deep decoders would blow the recursion limit otherwise
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if not t._parents]


def backward(loss: Tensor) -> Graph:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls, as in most frameworks; call
    ``zero_grad`` between steps.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericsError("loss is not finite")
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


# ---------------------------------------------------------------- misc


def clip_inf(t: Tensor, xi: float) -> Tensor:
    """Clamp every element into [-xi, xi]; returns a fresh leaf."""
    if xi < 0:
        raise ConfigError(f"clip bound must be non-negative, got {xi}")
    xi_t = t.data.dtype.type(xi)
    if xi_t > xi:
        # largest representable bound not exceeding xi
        xi_t = np.nextafter(xi_t, t.data.dtype.type(0))
    return Tensor(np.clip(t.data, -xi_t, xi_t), requires_grad=t.requires_grad)


DTNS_MAGIC = b"DTNS"


def save_dtns(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array.data if isinstance(array, Tensor) else array),
                               dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DTNS_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_dtns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DTNS_MAGIC:
        raise ShapeError(f"{path}: not a DTNS file")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - offset != 4 * count:
        raise ShapeError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f4", offset=offset, count=count).reshape(shape).astype(np.float32)
