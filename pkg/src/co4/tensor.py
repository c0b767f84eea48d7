"""Dense float64 tensors with a reverse-mode tape.

Every op is a pure function of its inputs.  When any input is tracked
(``requires_grad``) and gradients are enabled, the op appends a node to the
thread's current :class:`Tape`; node ids increase monotonically, so the tape
is already in topological order and :func:`backward` is a single reverse
sweep.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
import weakref
from collections import defaultdict
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError

_MAGIC = b"CO4T"
_local = threading.local()
_DEBUG = False


def set_debug(flag: bool) -> None:
    """Turn the post-op NaN/Inf sentinel on or off (process wide)."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


# ---------------------------------------------------------------------------
# tape


class Node(NamedTuple):
    kind: str
    inputs: tuple[int, ...]
    vjp: Callable | None
    ref: Callable[[], "Tensor | None"]


class Tape:
    """Append-only record of tracked ops.

    Use as a context manager to scope a fresh tape to one forward/backward
    pass.  A tape must only be used from the thread that created it.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def append(self, kind, inputs, vjp, tensor) -> int:
        nid = len(self.nodes)
        assert all(i < nid for i in inputs)
        # tensors point back at their tape, so the tape holds them weakly;
        # otherwise every activation would wait for the cyclic collector
        self.nodes.append(Node(kind, inputs, vjp, weakref.ref(tensor)))
        return nid

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("tapes").pop()


def _stack(name: str) -> list:
    st = getattr(_local, name, None)
    if st is None:
        st = []
        setattr(_local, name, st)
    return st


def current_tape() -> Tape:
    tapes = _stack("tapes")
    if not tapes:
        tapes.append(Tape())
        _local.implicit = tapes[0]
    return tapes[-1]


def grad_enabled() -> bool:
    return not getattr(_local, "no_grad", 0)


@contextlib.contextmanager
def no_grad():
    _local.no_grad = getattr(_local, "no_grad", 0) + 1
    try:
        yield
    finally:
        _local.no_grad -= 1


# ---------------------------------------------------------------------------
# multiply-accumulate audit


class MacCounter:
    """Counts scalar multiply-accumulates per named section.

    Matmuls contribute ``m*k*n`` per batch element, elementwise multiplies
    and divides one per output element.  Every op output shape is logged so
    callers can audit the largest intermediates.
    """

    def __init__(self) -> None:
        self.by_section: dict[str, int] = defaultdict(int)
        self.shapes: list[tuple[str, tuple[int, ...]]] = []

    @property
    def total(self) -> int:
        return int(sum(self.by_section.values()))

    def add(self, n: int) -> None:
        sections = _stack("sections")
        self.by_section[sections[-1] if sections else "other"] += int(n)


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _stack("counters").append(counter)
    try:
        yield counter
    finally:
        _stack("counters").pop()


@contextlib.contextmanager
def mac_section(name: str):
    _stack("sections").append(name)
    try:
        yield
    finally:
        _stack("sections").pop()


def record_macs(n: int) -> None:
    for c in _stack("counters"):
        c.add(n)


def _audit(kind: str, arr: np.ndarray) -> None:
    counters = getattr(_local, "counters", None)
    if counters:
        for c in counters:
            c.shapes.append((kind, arr.shape))
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {kind}")


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t._tape = None
        t.name = None
        return t

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
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operators
    def __add__(self, o):
        return elementwise("add", self, o)

    def __radd__(self, o):
        return elementwise("add", _as_tensor(o), self)

    def __sub__(self, o):
        return elementwise("sub", self, o)

    def __rsub__(self, o):
        return elementwise("sub", _as_tensor(o), self)

    def __mul__(self, o):
        return elementwise("mul", self, o)

    def __rmul__(self, o):
        return elementwise("mul", _as_tensor(o), self)

    def __truediv__(self, o):
        return elementwise("div", self, o)

    def __rtruediv__(self, o):
        return elementwise("div", _as_tensor(o), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __abs__(self):
        return absolute(self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> Tape:
        return backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    return Tensor._wrap(arr)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros_like(x.data))


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _node_of(t: Tensor, tape: Tape) -> int:
    if t._tape is not tape:
        t.node_id = tape.append("leaf", (), None, t)
        t._tape = tape
    return t.node_id


def _make(kind: str, arr: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    _audit(kind, arr)
    out = Tensor._wrap(arr)
    if not grad_enabled() or not any(t.requires_grad for t in inputs):
        return out
    tape = current_tape()
    ids = tuple(_node_of(t, tape) if t.requires_grad else -1 for t in inputs)
    out.requires_grad = True
    out.node_id = tape.append(kind, ids, vjp, out)
    out._tape = tape
    return out


def backward(loss: Tensor) -> Tape:
    """Reverse sweep from a scalar loss, filling ``.grad`` on tracked tensors."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape if loss.requires_grad else None
    if tape is None:
        raise ConfigError("loss is not connected to any tracked tensor")
    for node in tape.nodes:
        t = node.ref()
        if t is not None:
            t.grad = None
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        t = node.ref()
        if t is not None:
            t.grad = g
        if node.vjp is None:
            continue
        need = tuple(i >= 0 for i in node.inputs)
        for i, gi in zip(node.inputs, node.vjp(g, need)):
            if i >= 0 and gi is not None:
                prev = grads.get(i)
                grads[i] = gi if prev is None else prev + gi
    tapes = _stack("tapes")
    if getattr(_local, "implicit", None) is tape and tapes and tapes[0] is tape:
        # the implicit root tape is single-use; start afresh for the next pass
        tapes.pop(0)
        _local.implicit = None
    return tape


# ---------------------------------------------------------------------------
# broadcasting helpers


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def elementwise(op_kind: str, a, b) -> Tensor:
    """Binary elementwise op with trailing-dimension broadcasting."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    if op_kind == "add":
        out = x + y

        def vjp(g, need):
            return (
                _unbroadcast(g, x.shape) if need[0] else None,
                _unbroadcast(g, y.shape) if need[1] else None,
            )

    elif op_kind == "sub":
        out = x - y

        def vjp(g, need):
            return (
                _unbroadcast(g, x.shape) if need[0] else None,
                _unbroadcast(-g, y.shape) if need[1] else None,
            )

    elif op_kind == "mul":
        out = x * y
        record_macs(out.size)

        def vjp(g, need):
            return (
                _unbroadcast(g * y, x.shape) if need[0] else None,
                _unbroadcast(g * x, y.shape) if need[1] else None,
            )

    elif op_kind == "div":
        if np.any(y == 0):
            raise NumericError("division by zero")
        out = x / y
        record_macs(out.size)

        def vjp(g, need):
            return (
                _unbroadcast(g / y, x.shape) if need[0] else None,
                _unbroadcast(-g * x / (y * y), y.shape) if need[1] else None,
            )

    else:
        raise ConfigError(f"unknown elementwise op {op_kind!r}")
    return _make(op_kind, out, (a, b), vjp)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def div(a, b) -> Tensor:
    return elementwise("div", a, b)


def _unary(kind, x: Tensor, out: np.ndarray, local_grad: Callable[[], np.ndarray]) -> Tensor:
    def vjp(g, need):
        return (g * local_grad(),)

    return _make(kind, out, (x,), vjp)


def neg(x: Tensor) -> Tensor:
    return _make("neg", -x.data, (x,), lambda g, need: (-g,))


def absolute(x: Tensor) -> Tensor:
    d = x.data
    return _unary("abs", x, np.abs(d), lambda: np.sign(d))


def square(x: Tensor) -> Tensor:
    record_macs(x.size)
    d = x.data
    return _unary("square", x, d * d, lambda: 2.0 * d)


def power(x: Tensor, p: float) -> Tensor:
    d = x.data
    return _unary("pow", x, np.power(d, p), lambda: p * np.power(d, p - 1))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary("exp", x, out, lambda: out)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    d = x.data
    return _unary("log", x, np.log(d), lambda: 1.0 / d)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _unary("sqrt", x, out, lambda: 0.5 / out)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary("tanh", x, out, lambda: 1.0 - out * out)


def relu_alpha(x: Tensor, alpha: float) -> Tensor:
    """``min(max(0, x), alpha)``; subgradient 1 strictly inside, 0 at the kinks."""
    if not alpha > 0:
        raise ConfigError(f"relu_alpha cap must be positive, got {alpha}")
    x = _as_tensor(x)
    d = x.data
    return _unary("relu_alpha", x, np.clip(d, 0.0, alpha), lambda: ((d > 0) & (d < alpha)).astype(np.float64))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    d = x.data
    return _unary("clip", x, np.clip(d, lo, hi), lambda: ((d > lo) & (d < hi)).astype(np.float64))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def local():
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner

    return _unary("gelu", x, out, local)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out), (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make("mean", np.asarray(out), (x,), vjp)


def mean_pool(x: Tensor, axis: int = 1) -> Tensor:
    """Average over the token axis."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("mean_pool over an empty axis")
    return tmean(x, axis=axis)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _make("reshape", out, (x,), lambda g, need: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g, need: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 1: ``x[b, idx[b, j], :]`` -> shape (B, k, E)."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows needs x (B,N,E) and idx (B,k); got {x.shape}, {idx.shape}")
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)
    shape = x.shape

    def vjp(g, need):
        full = np.zeros(shape)
        b = np.arange(shape[0])[:, None]
        np.add.at(full, (b, idx), g)
        return (full,)

    return _make("gather_rows", out, (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def vjp(g, need):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(xs), vjp)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    if y.ndim == 2 and x.ndim > 2:
        out = (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
    else:
        out = np.matmul(x, y)
    record_macs(out.size * x.shape[-1])

    def vjp(g, need):
        da = db = None
        if need[0]:
            da = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        if need[1]:
            if y.ndim == 2 and x.ndim > 2:
                db = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                db = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return da, db

    return _make("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# softmax family


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, need):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax", s, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g, need):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, C)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ShapeError(f"cross_entropy needs (B, C) logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    out = np.asarray(-logp[np.arange(n), labels].mean())

    def vjp(g, need):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make("cross_entropy", out, (logits,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm, bt = gamma.data, beta.data
    out = xhat * gm + bt
    record_macs(2 * out.size)
    n = d.shape[-1]

    def vjp(g, need):
        dx = dg = db = None
        if need[0]:
            gx = g * gm
            dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        if need[1]:
            dg = _unbroadcast(g * xhat, gm.shape)
        if need[2]:
            db = _unbroadcast(g, bt.shape)
        return dx, dg, db

    return _make("layer_norm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# persistence


def save_tensor(f, t: Tensor | np.ndarray) -> None:
    """Write ``CO4T``, u32 rank, u32 dims, then little-endian f64 payload."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = _MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    if hasattr(f, "write"):
        f.write(header + payload)
    else:
        with open(f, "wb") as fh:
            fh.write(header + payload)


def load_tensor(f) -> Tensor:
    if hasattr(f, "read"):
        raw = f.read()
    else:
        with open(f, "rb") as fh:
            raw = fh.read()
    return decode_tensor(raw)


def decode_tensor(raw: bytes) -> Tensor:
    if raw[:4] != _MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r} at byte 0")
    if len(raw) < 8:
        raise FormatError("truncated header at byte 4")
    (rank,) = struct.unpack_from("<I", raw, 4)
    off = 8 + 4 * rank
    if len(raw) < off:
        raise FormatError(f"truncated dims at byte {len(raw)}")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(raw) != off + 8 * count:
        raise FormatError(f"payload is {len(raw) - off} bytes, expected {8 * count} (at byte {off})")
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
    return Tensor(arr.reshape(dims))
