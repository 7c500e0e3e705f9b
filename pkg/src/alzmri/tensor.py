"""Dense NumPy-backed tensors with reverse-mode autodiff over a dynamic tape.

Operations executed while a :class:`Tape` is active are recorded in call
order.  ``tape.backward(loss)`` walks the recording in reverse and returns
gradients for every trainable tensor (``requires_grad=True``) and every
tensor registered with :meth:`Tape.watch`.

Outside a tape nothing is recorded, so evaluation is the same code path
minus bookkeeping.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

LOG_EPS = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------- dtype


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _local.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (f64 for gradient checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


# ---------------------------------------------------------------- tensor


class Tensor:
    """N-d array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else default_dtype()
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.name = name
        self._node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------- tape


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"
    saved: dict = field(default_factory=dict)


class Gradients(dict):
    """Maps tensors (by identity) to gradient arrays of matching shape."""

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name is not None}


class Tape:
    """Define-by-run recording of differentiable operations.

    Use as a context manager; a tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._watched: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, t: Tensor) -> Tensor:
        self._watched[id(t)] = t
        return t

    def tracks(self, t: Tensor) -> bool:
        if t.requires_grad or id(t) in self._watched:
            return True
        return t._node is not None and t._node.tape is self

    def record(self, op, inputs, output, backward, saved=None) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        node = TapeNode(op, tuple(inputs), output, backward, self, saved or {})
        output._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> Gradients:
        if self.consumed:
            raise TapeError("backward already called on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not self.tracks(inp):
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    keep[key] = inp

        out = Gradients()
        for key, t in keep.items():
            if t.requires_grad or key in self._watched:
                out[t] = grads[key].astype(t.dtype, copy=False)
        for key, t in self._watched.items():
            if t not in out:
                out[t] = np.zeros_like(t.data) if key != id(loss) else np.ones_like(t.data)
        # drop references so recorded activations can be freed
        self.nodes = []
        return out


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (e.g. for evaluation inside a training step)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def backward(loss: Tensor) -> Gradients:
    """Differentiate ``loss`` on the tape that recorded it."""
    if loss._node is None:
        raise TapeError("loss has no recorded history")
    return loss._node.tape.backward(loss)


def make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn, check_finite: bool = True) -> Tensor:
    """Wrap an op result and record it if any input is tracked."""
    if check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------- helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make("div", out, (a, b), bw)


def negate(a) -> Tensor:
    a = as_tensor(a)
    return make("negate", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # make() reports overflow as NonFiniteError
        out = np.exp(a.data)
    return make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("sqrt needs strictly positive input")
    out = np.sqrt(a.data)
    return make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "negate": negate,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by op tag: add, sub, mul, div, relu, sigmoid, exp, log, negate."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op} is unary")
    return fn(a)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dims of both operands must agree."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make("matmul", a.data @ b.data, (a, b), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    (axis,) = _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make("softmax", out, (x,), bw)


# ---------------------------------------------------------------- reductions


def reduce(op: str, x, axes=None, keepdims: bool = False) -> Tensor:
    """Sum / mean / max over ``axes`` (all axes when None)."""
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1

    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    elif op == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept) / count, x.shape).copy(),)

    elif op == "max":
        out = x.data.max(axis=axes, keepdims=keepdims)
        # gradient goes to the first (row-major) maximum of each reduced group
        rest = [i for i in range(x.ndim) if i not in axes]
        perm = rest + list(axes)
        moved = x.data.transpose(perm).reshape([x.shape[i] for i in rest] + [count])
        first = moved.argmax(axis=-1)
        onehot = np.zeros_like(moved)
        np.put_along_axis(onehot, first[..., None], 1, axis=-1)
        onehot = onehot.reshape([x.shape[i] for i in perm]).transpose(np.argsort(perm))

        def bw(g):
            return (onehot * g.reshape(kept),)

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return make(op, np.asarray(out, dtype=x.dtype), (x,), bw)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def amax(x, axis=None, keepdims=False) -> Tensor:
    return reduce("max", x, axis, keepdims)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return make("reshape", out, (x,), lambda g: (g.reshape(x.shape),), check_finite=False)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), check_finite=False)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    (axis,) = _norm_axes(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make("concat", out, tensors, bw, check_finite=False)


def take(x, indices, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate in backward."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    (axis,) = _norm_axes(axis, x.ndim)
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return make("take", out, (x,), bw, check_finite=False)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=x.dtype)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make("getitem", out, (x,), bw, check_finite=False)


# ---------------------------------------------------------------- verification


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between ``backward`` and central differences.

    ``f`` maps a tensor to a scalar tensor.  The error is the largest
    coordinate deviation ``|analytic - numeric|`` divided by the largest
    gradient magnitude (see :func:`relative_error`), so round-off in
    near-zero coordinates does not dominate in float32.
    ``coords`` restricts the numeric side to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(np.array(as_tensor(x).data), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    analytic = tape.backward(y).get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    analytic = analytic.ravel().astype(np.float64)

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    numeric = np.zeros(len(idx))
    ana = np.zeros(len(idx))
    with no_tape():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data.sum())
            flat[i] = orig - step
            fm = float(f(x).data.sum())
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * step)
            ana[n] = analytic[i]
    return relative_error(ana, numeric)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    """``max |analytic - numeric| / scale``.

    ``scale`` defaults to the largest magnitude in either argument.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if scale is None:
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def parameter_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` w.r.t. trainable tensors in place.

    Returns the max relative error per parameter (keyed by name).  With
    ``max_coords`` only that many randomly chosen coordinates per tensor
    are probed numerically.  Errors are relative to the largest gradient
    over all ``params``, so tensors with an identically zero gradient
    (e.g. attention key biases) are judged on round-off.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    scale = max(float(np.abs(grads[p]).max()) for p in params if p in grads) if grads else 0.0
    rng = np.random.default_rng(seed)
    out = {}
    with no_tape():
        for n, p in enumerate(params):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
            numeric = np.empty(len(coords))
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(loss_fn().data.sum())
                flat[i] = orig - step
                fm = float(loss_fn().data.sum())
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * step)
            analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1)[coords]
            out[p.name or f"param{n}"] = relative_error(analytic, numeric, scale)
    return out
