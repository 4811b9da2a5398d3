"""Dense tensors and the reverse-mode gradient tape.

A :class:`Tensor` wraps a contiguous row-major numpy array.  Operations that
touch a tensor with ``requires_grad`` while a :class:`Tape` is active append a
:class:`Node` to that tape; :func:`backward` then walks the tape once in reverse
creation order.  Nothing is recorded outside a ``with Tape():`` block, so
inference never pays for bookkeeping.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DetachedError, DimensionError, NumericError

_DTYPES = (np.float32, np.float64)

_state = {
    "dtype": np.float32,
    "debug": False,
}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in _DTYPES:
        raise DimensionError(f"unsupported dtype {dtype!r}; expected float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag: bool) -> None:
    """Enable the NaN/Inf scan on every op output (costs one pass per op)."""
    _state["debug"] = bool(flag)


def debug_enabled() -> bool:
    return _state["debug"]


@contextlib.contextmanager
def debug_checks(flag: bool = True) -> Iterator[None]:
    old = _state["debug"]
    _state["debug"] = bool(flag)
    try:
        yield
    finally:
        _state["debug"] = old


class MemoryTracker:
    """Bytes held by live Tensor payloads, with a resettable high-water mark."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def reset_peak(self) -> None:
        self.peak = self.live

    def _alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def _free(self, nbytes: int) -> None:
        self.live -= nbytes


memory = MemoryTracker()


class OpCounter:
    """Accumulates arithmetic op counts reported by kernels while active."""

    def __init__(self) -> None:
        self.ops = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.ops += int(n)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)


_counters: list[OpCounter] = []


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def add_ops(kind: str, n: int) -> None:
    for c in _counters:
        c.add(kind, n)


def counting() -> bool:
    return bool(_counters)


class Tensor:
    """Row-major numeric array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "_nbytes", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in _DTYPES:
                dtype = data.dtype.type
            else:
                dtype = _state["dtype"]
        elif np.dtype(dtype).type not in _DTYPES:
            raise DimensionError(f"unsupported dtype {dtype!r}")
        arr = np.ascontiguousarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name
        self._nbytes = arr.nbytes
        memory._alloc(self._nbytes)

    def __del__(self):
        try:
            memory._free(self._nbytes)
        except AttributeError:
            pass

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
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar; the implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce("max", self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = _state["dtype"]
    return Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """One recorded primitive: its inputs, its output and how to pull back a gradient."""

    __slots__ = ("op", "inputs", "output", "backward", "tape", "index")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn,
                 tape: "Tape", index: int):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.tape = tape
        self.index = index


class Tape:
    """Ordered record of primitive ops.

    Nodes are appended in creation order, which is already a topological order
    of the graph, so backward needs no sort.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes.clear()


_tapes: list[Tape] = []


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` in a Tensor and put it on the active tape when a gradient is needed.

    ``backward_fn`` receives the upstream gradient (same shape as ``out``) and
    returns one gradient per input, or None for inputs it does not touch.
    """
    if _state["debug"]:
        check_finite(out, op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        node = Node(op, tuple(inputs), result, backward_fn, tape, len(tape.nodes))
        tape.nodes.append(node)
        result.node = node
    return result


def backward(loss: Tensor, retain: bool = False) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated; the
    returned mapping holds the gradient of each such leaf.  The tape is reset
    afterwards unless ``retain`` is set.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise DetachedError("loss is not attached to an active tape")
    tape = loss.node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise DimensionError(
                    f"{node.op} backward produced grad {gi.shape} for input {inp.shape}")
            key = id(inp)
            if inp.node is None:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    if not retain:
        tape.reset()
    return out
