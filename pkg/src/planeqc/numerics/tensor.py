"""Dense tensors with a reverse-mode gradient tape.

Storage is a contiguous numpy array. Every differentiable op that touches a
tensor with ``requires_grad`` appends a record to the thread-local tape;
:func:`backward` replays the records in reverse execution order and then
clears the tape.

Broadcasting is deliberately limited to a 0-d operand. Anything wider goes
through :func:`broadcast_to`, which keeps the gradient bookkeeping explicit.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from numbers import Number
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, DomainError, NonFiniteError

_DTYPES = {"f32": np.float32, "f64": np.float64}

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Record:
    __slots__ = ("out", "inputs", "backward", "name")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn, name: str):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.name = name


class GradientTape:
    """Ordered log of executed differentiable ops."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn, name: str) -> None:
        self.records.append(_Record(out, inputs, fn, name))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad")
        seed = np.ones(loss.shape, dtype=loss.dtype)
        if loss._leaf:
            loss._accumulate(seed)
            self.clear()
            return
        if not any(rec.out is loss for rec in self.records):
            raise ContractError("loss was not produced on the active tape")

        grads: dict[int, np.ndarray] = {id(loss): seed}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gt in zip(rec.inputs, rec.backward(g)):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gt if prev is None else prev + gt
                if t._leaf:
                    leaves[key] = t
        for key, t in leaves.items():
            t._accumulate(grads[key])
        self.clear()


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True
        self.tape = GradientTape()


_state = _State()


def get_dtype() -> type:
    return _state.dtype


def set_precision(kind: str) -> None:
    try:
        _state.dtype = _DTYPES[kind]
    except KeyError:
        raise ContractError(f"unknown precision {kind!r}; expected one of {sorted(_DTYPES)}") from None


@contextmanager
def precision(kind: str) -> Iterator[None]:
    """Temporarily switch the default storage dtype (``"f32"`` or ``"f64"``)."""
    prev = _state.dtype
    set_precision(kind)
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def current_tape() -> GradientTape:
    return _state.tape


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf, then clear the tape."""
    _state.tape.backward(loss)


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


class Tensor:
    __array_priority__ = 1000

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _state.dtype)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = _contiguous(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn, name: str) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{name} produced non-finite values")
        out = cls.__new__(cls)
        out.data = _contiguous(np.asarray(data))
        out.grad = None
        out._leaf = False
        track = _state.grad_enabled and any(t.requires_grad for t in inputs)
        out.requires_grad = track
        if track:
            _state.tape.record(out, inputs, fn, name)
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.dtype).reshape(self.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    # -- introspection -------------------------------------------------
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
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    # -- method aliases ------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False) -> Tensor:
        return reduce_max(self, axis, keepdims)

    def min(self, axis=None, keepdims=False) -> Tensor:
        return reduce_min(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(x, dtype=like.dtype)
    return Tensor(x)


def _unify(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        if not isinstance(b, Number) and np.ndim(b) != 0:
            raise DimensionError("non-tensor operand must be a scalar")
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        if not isinstance(a, Number) and np.ndim(a) != 0:
            raise DimensionError("non-tensor operand must be a scalar")
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _unify(a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _unify(a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _unify(a, b)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = _unify(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return Tensor._from_op(
        out, (a, b),
        lambda g: (_fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)), "div",
    )


def elementwise(kind: str, a, b) -> Tensor:
    """Binary op by name: ``add``, ``sub``, ``mul`` or ``div``."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ContractError(f"unknown elementwise op {kind!r}")
    return ops[kind](a, b)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def fn(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return Tensor._from_op(out, (a,), fn, "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p
    return Tensor._from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def absolute(a: Tensor) -> Tensor:
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sin(a: Tensor) -> Tensor:
    return Tensor._from_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return Tensor._from_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


# -- linear algebra and shape ---------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return Tensor._from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = np.array(a.data[idx])

    def fn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return Tensor._from_op(out, (a,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DomainError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DomainError("stack of an empty sequence")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    n = len(tensors)
    return Tensor._from_op(
        out, tensors,
        lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)), "stack",
    )


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the only way to widen a non-scalar."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    lead = len(shape) - a.ndim

    def fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(a.shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor._from_op(out, (a,), fn, "broadcast_to")


# -- reductions -----------------------------------------------------------

def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _check_nonempty(a: Tensor, axes: tuple[int, ...]) -> int:
    if a.size == 0:
        raise DomainError("reduction over an empty tensor")
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return count


def _expand(g: np.ndarray, a: Tensor, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes) if axes else g
    return np.broadcast_to(g, a.shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    _check_nonempty(a, axes)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._from_op(np.asarray(out), (a,), lambda g: (_expand(g, a, axes, keepdims).copy(),), "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    n = _check_nonempty(a, axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return Tensor._from_op(np.asarray(out), (a,), lambda g: (_expand(g, a, axes, keepdims) / n,), "mean")


def _extremum(a: Tensor, axis, keepdims: bool, fn_np, name: str) -> Tensor:
    axes = _axes(axis, a.ndim)
    _check_nonempty(a, axes)
    out_k = fn_np(a.data, axis=axes, keepdims=True)
    hit = (a.data == out_k).astype(a.dtype)
    share = hit / hit.sum(axis=axes, keepdims=True)
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    return Tensor._from_op(np.asarray(out), (a,), lambda g: (_expand(g, a, axes, keepdims) * share,), name)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extremum(a, axis, keepdims, np.max, "max")


def reduce_min(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extremum(a, axis, keepdims, np.min, "min")


def reduce_l1(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    _check_nonempty(a, axes)
    out = np.abs(a.data).sum(axis=axes, keepdims=keepdims)
    sign = np.sign(a.data)
    return Tensor._from_op(np.asarray(out), (a,), lambda g: (_expand(g, a, axes, keepdims) * sign,), "l1")


def reduce_l2(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is taken as zero."""
    axes = _axes(axis, a.ndim)
    _check_nonempty(a, axes)
    norm_k = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=True))
    unit = np.divide(a.data, norm_k, out=np.zeros_like(a.data), where=norm_k > 0)
    out = norm_k if keepdims else np.squeeze(norm_k, axis=axes)
    return Tensor._from_op(np.asarray(out), (a,), lambda g: (_expand(g, a, axes, keepdims) * unit,), "l2")


def reduce_std(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divide by N)."""
    axes = _axes(axis, a.ndim)
    n = _check_nonempty(a, axes)
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    std_k = np.sqrt((centered * centered).mean(axis=axes, keepdims=True))
    coef = np.divide(centered, n * std_k, out=np.zeros_like(a.data), where=std_k > 0)
    out = std_k if keepdims else np.squeeze(std_k, axis=axes)
    return Tensor._from_op(np.asarray(out), (a,), lambda g: (_expand(g, a, axes, keepdims) * coef,), "std")


_REDUCTIONS = {
    "sum": reduce_sum,
    "mean": reduce_mean,
    "min": reduce_min,
    "max": reduce_max,
    "l1": reduce_l1,
    "l2": reduce_l2,
    "std": reduce_std,
}


def reduction(kind: str, t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if kind not in _REDUCTIONS:
        raise ContractError(f"unknown reduction {kind!r}")
    return _REDUCTIONS[kind](t, axis, keepdims)
