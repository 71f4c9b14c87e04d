"""Dense tensors with a define-by-run reverse-mode tape.

Every differentiable op in the package goes through :func:`record`: when a
:class:`Tape` is active and any input requires grad, the op appends a node
holding its inputs, output and a closure mapping the output gradient to
input gradients. :func:`backward` replays the nodes in reverse.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_local = threading.local()


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


def check_finite_enabled() -> bool:
    return os.environ.get("UNSQ_CHECK_FINITE", "") not in ("", "0")


def _assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise NonFiniteError(f"{what}: non-finite value at flat index {bad}")


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Activations are 4-D ``(n, c, h, w)``; per-channel parameters such as
    biases are 1-D. Hashing is by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, _validate: bool = True):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if _validate:
            _assert_finite(arr, name or "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, _validate=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scalar_add(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return scalar_add(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of ops for one forward/backward pass.

    Use as a context manager; ops executed inside it are recorded. Leaves are
    tensors that require grad but were not produced on this tape; they are
    registered on first use or explicitly via :meth:`watch`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._produced: set[int] = set()

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            self._add_leaf(t)

    def _add_leaf(self, t: Tensor) -> None:
        if id(t) not in self._leaf_ids and id(t) not in self._produced:
            self._leaf_ids.add(id(t))
            self.leaves.append(t)

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._produced or id(t) in self._leaf_ids


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording, e.g. for evaluation passes inside a training loop."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` as a Tensor and put it on the active tape if needed."""
    if check_finite_enabled():
        _assert_finite(out_data, f"output of {op}")
    out = Tensor(out_data, _validate=False)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    for t in inputs:
        if t.requires_grad:
            tape._add_leaf(t)
    out.requires_grad = True
    tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    tape._produced.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Back-propagate from a scalar ``loss``.

    Returns ``{leaf: gradient}`` for every leaf on the tape (zeros for leaves
    the loss does not reach) and adds the same gradients into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.owns(loss):
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    result: dict[Tensor, Tensor] = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = Tensor(g, _validate=False)
    return result


# --- elementwise ---------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return record("scalar_mul", (a,), a.data * s, lambda g: (g * s,))


def scalar_add(a: Tensor, s: float) -> Tensor:
    return record("scalar_add", (a,), a.data + s, lambda g: (g,))


def negate(a: Tensor) -> Tensor:
    return record("negate", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    bad = np.flatnonzero(a.data.ravel() <= 0)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"log: non-positive input {a.data.ravel()[i]!r} at flat index {i}")
    ad = a.data
    return record("log", (a,), np.log(ad), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, 0.0).astype(a.dtype, copy=False),
                  lambda g: (g * mask,))


_BINARY = {"add": add, "sub": sub, "mul": mul}
_SCALAR = {"scalar-mul": scalar_mul, "scalar-add": scalar_add}
_UNARY = {"exp": exp, "log": log, "negate": negate}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scalar-mul, scalar-add, exp, log, negate."""
    a = as_tensor(a)
    if kind in _BINARY:
        return _BINARY[kind](a, as_tensor(b, dtype=a.dtype))
    if kind in _SCALAR:
        return _SCALAR[kind](a, float(b))
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# --- reductions ----------------------------------------------------------

def _flat_sum(arr: np.ndarray) -> np.ndarray:
    # pairwise summation over a contiguous 1-D buffer: the order depends only on length
    return np.sum(np.ascontiguousarray(arr).reshape(-1))


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    out = _flat_sum(a.data).reshape(1, 1, 1, 1)
    return record("sum", (a,), out, lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def reduce_mean(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise ValueError("mean of empty tensor")
    shape, n = a.shape, a.data.size
    out = (_flat_sum(a.data) / n).reshape(1, 1, 1, 1)
    return record("mean", (a,), out,
                  lambda g: (np.full(shape, g.reshape(()) / n, dtype=g.dtype),))


def reduce(kind: str, a: Tensor) -> Tensor:
    if kind == "sum":
        return reduce_sum(a)
    if kind == "mean":
        return reduce_mean(a)
    raise ValueError(f"unknown reduction {kind!r}")


# --- finite-difference checking ------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    checked: int
    worst_index: int | None = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, epsilon: float = 1e-5,
               tolerance: float = 1e-4, indices: Sequence[int] | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` to central differences.

    ``indices`` restricts the check to selected flat coordinates (large inputs).
    Raises if ``f`` is not scalar or evaluates to a non-finite value anywhere.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    _assert_finite(base, "grad_check input")

    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        tape.watch(leaf)
        y = f(leaf)
    if y.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {y.shape}")
    _assert_finite(y.data, "grad_check f(x)")
    analytic = backward(tape, y)[leaf].data.reshape(-1)

    def value(arr: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(arr, _validate=False))
        if out.data.size != 1:
            raise ValueError("grad_check needs a scalar function")
        _assert_finite(out.data, "grad_check f(x±eps)")
        return out.item()

    flat = base.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst, worst_i, count = 0.0, None, 0
    for i in coords:
        plus = flat.copy()
        plus[i] += epsilon
        minus = flat.copy()
        minus[i] -= epsilon
        numeric = (value(plus.reshape(base.shape)) - value(minus.reshape(base.shape))) / (2 * epsilon)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        count += 1
        if worst_i is None or rel > worst:
            worst, worst_i = rel, i
    return GradCheckReport(worst, worst <= tolerance, count, worst_i)
