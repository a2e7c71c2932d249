"""Dense float64 arrays with reverse-mode differentiation on an explicit tape.

Every trainable computation in the engine is expressed through the ops in
this module.  Forward values are plain numpy arrays wrapped in :class:`Value`;
when a :class:`Tape` is active, each op records a backward closure so that
``tape.backward(loss)`` accumulates gradients into ``requires_grad`` leaves.
Without an active tape the same ops run as cheap forward-only computations.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or infinity."""


class TapeError(RuntimeError):
    """Tape misuse: nested recording or backward called twice."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Value:
    """A dense float64 array, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("Value initialised with non-finite entries")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records op order for one forward pass; replays it in reverse.

    Recording order is a topological order by construction (an op's parents
    exist before the op runs), so the reverse sweep visits every node exactly
    once with its full upstream gradient.  One tape per thread; a tape can be
    consumed by :meth:`backward` only once.
    """

    def __init__(self):
        self._nodes: list[Value] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already recording on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def backward(self, root: Value) -> None:
        if self._spent:
            raise TapeError("backward called twice on one tape")
        self._spent = True
        if root.data.shape != ():
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        root.accumulate(np.ones_like(root.data))
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


def _make(data: np.ndarray, parents: tuple[Value, ...],
          backward: Callable[[np.ndarray], None], op: str) -> Value:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite result in op '{op}'")
    out = Value.__new__(Value)
    out.data = data
    out.requires_grad = False
    out.grad = None
    tape = _active_tape()
    if tape is not None:
        out._parents = parents
        out._backward = backward
        tape._nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a: Value, b: Value) -> Value:
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data + b.data

    def backward(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def mul(a: Value, b: Value) -> Value:
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        data = a.data * b.data

    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def scale(a: Value, s: float) -> Value:
    s = float(s)
    data = a.data * s

    def backward(g):
        a.accumulate(g * s)

    return _make(data, (a,), backward, "scale")


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data @ b.data

    def backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def reshape(a: Value, shape: tuple[int, ...]) -> Value:
    data = a.data.reshape(shape)

    def backward(g):
        a.accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward, "reshape")


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    if not values:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for v, lo, hi in zip(values, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            v.accumulate(g[tuple(sl)])

    return _make(data, tuple(values), backward, "concat")


def stack_rows(values: Sequence[Value]) -> Value:
    """Stack 1-D values of equal length into a matrix, one per row."""
    if not values:
        raise ShapeError("stack_rows of an empty list")
    for v in values:
        if v.data.ndim != 1 or v.data.shape != values[0].data.shape:
            raise ShapeError("stack_rows expects 1-D values of equal length")
    data = np.stack([v.data for v in values])

    def backward(g):
        for i, v in enumerate(values):
            v.accumulate(g[i])

    return _make(data, tuple(values), backward, "stack_rows")


def gather_rows(a: Value, idx) -> Value:
    """Select rows of a matrix by index; backward scatter-adds."""
    if a.data.ndim != 2:
        raise ShapeError("gather_rows expects a matrix")
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return _make(data, (a,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a: Value) -> Value:
    x = a.data
    with np.errstate(over="ignore", under="ignore"):
        data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def backward(g):
        a.accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward, "sigmoid")


def relu(a: Value) -> Value:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a.accumulate(g * (a.data > 0))

    return _make(data, (a,), backward, "relu")


def log(a: Value) -> Value:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g):
        a.accumulate(g / a.data)

    return _make(data, (a,), backward, "log")


def softmax(a: Value) -> Value:
    if a.data.ndim != 1:
        raise ShapeError("softmax expects a 1-D value")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    data = e / e.sum()

    def backward(g):
        a.accumulate(data * (g - np.dot(g, data)))

    return _make(data, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def rows_max(a: Value, keepdims: bool = False) -> Value:
    """Per-column max over rows; gradient routes to the first maximal row."""
    if a.data.ndim != 2 or a.data.shape[0] == 0:
        raise ShapeError("rows_max expects a non-empty matrix")
    arg = np.argmax(a.data, axis=0)  # first occurrence = lowest row index
    cols = np.arange(a.data.shape[1])
    data = a.data[arg, cols]
    if keepdims:
        data = data[None, :]

    def backward(g):
        full = np.zeros_like(a.data)
        full[arg, cols] = g.reshape(-1)
        a.accumulate(full)

    return _make(data, (a,), backward, "rows_max")


def rows_mean(a: Value, keepdims: bool = False) -> Value:
    if a.data.ndim != 2 or a.data.shape[0] == 0:
        raise ShapeError("rows_mean expects a non-empty matrix")
    n = a.data.shape[0]
    data = a.data.mean(axis=0)
    if keepdims:
        data = data[None, :]

    def backward(g):
        a.accumulate(np.broadcast_to(g.reshape(1, -1) / n, a.data.shape).copy())

    return _make(data, (a,), backward, "rows_mean")


def max_pool_set(values: Sequence[Value]) -> Value:
    """Elementwise max over a non-empty set of same-length vectors.

    Ties route the gradient to the lowest list index.
    """
    if not values:
        raise ShapeError("max_pool_set of an empty list")
    return rows_max(stack_rows(values))


def mean_pool_set(values: Sequence[Value]) -> Value:
    if not values:
        raise ShapeError("mean_pool_set of an empty list")
    return rows_mean(stack_rows(values))


def vec_max(a: Value) -> Value:
    """Max entry of a 1-D value; gradient routes to the first argmax."""
    if a.data.ndim != 1 or a.data.size == 0:
        raise ShapeError("vec_max expects a non-empty 1-D value")
    arg = int(np.argmax(a.data))
    data = np.asarray(a.data[arg])

    def backward(g):
        full = np.zeros_like(a.data)
        full[arg] = g
        a.accumulate(full)

    return _make(data, (a,), backward, "vec_max")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Value, target: int) -> Value:
    """Softmax cross-entropy of 1-D logits against a class index."""
    if logits.data.ndim != 1:
        raise ShapeError("cross_entropy expects 1-D logits")
    if not 0 <= target < logits.data.size:
        raise ShapeError(f"target {target} out of range for {logits.data.size} classes")
    shifted = logits.data - logits.data.max()
    lse = np.log(np.exp(shifted).sum())
    data = np.asarray(lse - shifted[target])
    p = np.exp(shifted - lse)

    def backward(g):
        grad = p.copy()
        grad[target] -= 1.0
        logits.accumulate(g * grad)

    return _make(data, (logits,), backward, "cross_entropy")


def cross_entropy_rows(logits: Value, targets, weights=None) -> Value:
    """Weighted mean softmax cross-entropy over rows of a logits matrix."""
    if logits.data.ndim != 2 or logits.data.shape[0] == 0:
        raise ShapeError("cross_entropy_rows expects a non-empty logits matrix")
    targets = np.asarray(targets, dtype=np.intp)
    n, k = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError("one target per logits row required")
    if targets.min() < 0 or targets.max() >= k:
        raise ShapeError("target index out of range")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_row = lse - shifted[np.arange(n), targets]
    data = np.asarray((w * per_row).sum() / wsum)
    p = np.exp(shifted - lse[:, None])

    def backward(g):
        grad = p.copy()
        grad[np.arange(n), targets] -= 1.0
        grad *= (g * w / wsum)[:, None]
        logits.accumulate(grad)

    return _make(data, (logits,), backward, "cross_entropy_rows")


def add_scalars(values: Sequence[Value]) -> Value:
    """Sum of scalar values."""
    out = values[0]
    for v in values[1:]:
        out = add(out, v)
    return out


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Value], params: Sequence[tuple[str, Value]],
               step: float = 1e-5, max_entries_per_param: int | None = None,
               seed: int = 0) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` is a deterministic scalar-valued closure over the given parameters.
    Returns the maximum over checked entries of
    ``|analytic - central| / max(1, |central|)``.  When
    ``max_entries_per_param`` is set, a seeded random subset of entries is
    checked per parameter tensor (full forward models are too wide to probe
    exhaustively in bounded time).
    """
    for _, p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        tape.backward(out)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = range(n)
        a_flat = analytic[name].reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * step)
            err = abs(a_flat[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
