"""Dense float64 tensors with reverse-mode autodiff over a recorded tape.

Operations append nodes to the active :class:`Tape` whenever one of their
inputs requires a gradient. ``backward(tape, root)`` then walks the tape in
reverse creation order, which is a valid topological order because inputs
are always recorded before the node that consumes them.

Only scalar broadcasting is supported. Anything else (bias rows, channel
stacking) goes through a dedicated op so shapes never mix silently.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray, tuple], tuple]

_REGISTERED: dict[str, str] = {}


def register_op(kind: str, module: str = __name__) -> str:
    """Declare a differentiable op kind. Every kind must have a grad-check case."""
    _REGISTERED.setdefault(kind, module)
    return kind


def registered_ops() -> list[str]:
    return sorted(_REGISTERED)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple  # node id per input, None for inputs outside the graph
    backward: BackwardFn | None


class Tape:
    """Append-only record of one forward pass.

    Use as a context manager to make it the active tape::

        with Tape() as tape:
            loss = ...
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._leaves: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.remove(self)

    def _node_of(self, t: Tensor) -> int | None:
        if not t.requires_grad:
            return None
        if t.node is not None and t._tape is self:
            return t.node
        if t.node is not None:
            raise RuntimeError("tensor was produced on a different tape")
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), None))
            self._leaf_ids[id(t)] = nid
            self._leaves[nid] = t
        return nid

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, fn: BackwardFn) -> Tensor:
        if kind not in _REGISTERED:
            raise KeyError(f"op kind {kind!r} is not registered")
        ids = tuple(self._node_of(t) for t in inputs)
        result = Tensor._wrap(out)
        if all(i is None for i in ids):
            return result
        result.requires_grad = True
        result.node = len(self.nodes)
        result._tape = self
        self.nodes.append(Node(kind, ids, fn))
        return result


_STACK: list[Tape] = []
_DEFAULT = Tape()
_GRAD_ENABLED = [True]


def active_tape() -> Tape | None:
    if not _GRAD_ENABLED[-1]:
        return None
    return _STACK[-1] if _STACK else _DEFAULT


def reset_default_tape() -> None:
    global _DEFAULT
    _DEFAULT = Tape()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording a tape node if any input needs a gradient."""
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(out)
    return tape.record(kind, inputs, out, fn)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Populate gradients of a scalar ``root`` for every reachable node.

    Leaf tensors get their ``.grad`` slot summed with the new gradient.
    Returns the full node-id -> gradient map.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if root.node is None or root._tape is not tape:
        raise ValueError("backward root was not produced on this tape")
    grads: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    for nid in range(root.node, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.backward is None:
            continue
        needs = tuple(i is not None for i in node.inputs)
        parts = node.backward(g, needs)
        for i, gi in zip(node.inputs, parts):
            if i is None:
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    for nid, leaf in tape._leaves.items():
        g = grads.get(nid)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return grads


# elementwise -----------------------------------------------------------------

for _k in ("add", "sub", "mul", "relu", "scale", "matmul", "sum", "mean", "reshape"):
    register_op(_k)


def _binary_operand(a: Tensor, b) -> tuple[Tensor, bool]:
    """Return (b as tensor, broadcast flag) after validating shapes."""
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if b.shape == a.shape:
        return b, False
    if b.size == 1:
        return b, True
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, like: Tensor, broadcast: bool) -> np.ndarray:
    return np.sum(g).reshape(like.shape) if broadcast else g


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b, bc = _binary_operand(a, b)
    out = a.data + (b.data.reshape(()) if bc else b.data)

    def fn(g, needs):
        return g, _unbroadcast(g, b, bc) if needs[1] else None

    return emit("add", (a, b), out, fn)


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b, bc = _binary_operand(a, b)
    out = a.data - (b.data.reshape(()) if bc else b.data)

    def fn(g, needs):
        return g, _unbroadcast(-g, b, bc) if needs[1] else None

    return emit("sub", (a, b), out, fn)


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b, bc = _binary_operand(a, b)
    bv = b.data.reshape(()) if bc else b.data
    out = a.data * bv

    def fn(g, needs):
        ga = g * bv if needs[0] else None
        gb = _unbroadcast(g * a.data, b, bc) if needs[1] else None
        return ga, gb

    return emit("mul", (a, b), out, fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def fn(g, needs):
        return (np.where(mask, g, 0.0),)

    return emit("relu", (a,), out, fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def fn(g, needs):
        return (g * s,)

    return emit("scale", (a,), out, fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k] @ [k,n], accumulated over k in ascending order."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = kernels.matmul(a.data, b.data)

    def fn(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return emit("matmul", (a, b), out, fn)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.sum(a.data).reshape(())

    def fn(g, needs):
        return (np.full(a.shape, g.reshape(()).item()),)

    return emit("sum", (a,), out, fn)


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = (np.sum(a.data) / n).reshape(())

    def fn(g, needs):
        return (np.full(a.shape, g.reshape(()).item() / n),)

    return emit("mean", (a,), out, fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))

    def fn(g, needs):
        return (g.reshape(a.shape),)

    return emit("reshape", (a,), out, fn)


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul take a second operand; scale takes a scalar."""
    if op_kind == "relu":
        return relu(a)
    if op_kind == "scale":
        return scale(a, b)
    ops = {"add": add, "sub": sub, "mul": mul}
    if op_kind not in ops:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return ops[op_kind](a, b)


# finite differences ----------------------------------------------------------


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x``, perturbed in place.

    ``coords`` restricts the estimate to the given flat indices; the rest stay 0.
    """
    flat = x.reshape(-1)
    out = np.zeros(flat.shape)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    n = np.asarray(numeric, dtype=DTYPE).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, coords=None) -> float:
    """Max relative error between tape gradients and central differences of ``f`` at ``x``."""
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if not np.isfinite(y.data).all():
        raise FloatingPointError("non-finite value at x")
    backward(tape, y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    def value() -> float:
        with no_grad():
            return f(x).item()

    numeric = numeric_grad(value, x.data, h, coords)
    if coords is not None:
        sel = np.asarray(list(coords))
        return relative_error(analytic.reshape(-1)[sel], numeric.reshape(-1)[sel])
    return relative_error(analytic, numeric)
