"""Dense tensors with a tape-based reverse-mode autodiff engine.

Every differentiable operation computes its forward result with numpy and,
when at least one operand requires a gradient, appends a record to the
active :class:`Tape`.  A record stores the operand tensors, the values the
backward rule needs, and the identifier of that rule in
:data:`BACKWARD_RULES`.  :func:`backward` replays the records of one tape in
reverse execution order exactly once.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ArgumentError, NumericalError, ShapeError, StateError

BackwardRule = Callable[[Any, np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]

#: rule identifier -> function(saved, grad_out, needs_grad) -> input gradients
BACKWARD_RULES: Dict[str, BackwardRule] = {}

_DEFAULT_DTYPE = np.float64


def register_backward(rule: str) -> Callable[[BackwardRule], BackwardRule]:
    def decorator(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[rule] = fn
        return fn

    return decorator


def set_default_dtype(dtype) -> None:
    """Dtype used when a tensor is built from non-floating data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ArgumentError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype or _DEFAULT_DTYPE)
        if arr.size == 0 or any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{label})"

    # arithmetic sugar; the functions live in ops to keep one implementation
    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other, self))

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def sum(self) -> "Tensor":
        from . import ops

        return ops.sum(self)

    def mean(self) -> "Tensor":
        from . import ops

        return ops.mean(self)

    def reshape(self, *shape) -> "Tensor":
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.dtype), like.shape).copy())


@dataclass
class Record:
    rule: str
    inputs: Tuple[Tensor, ...]
    output: Union[Tensor, Tuple[Tensor, ...]]
    saved: Any

    @property
    def outputs(self) -> Tuple[Tensor, ...]:
        return self.output if isinstance(self.output, tuple) else (self.output,)


@dataclass
class Tape:
    """Ordered log of executed differentiable operations.

    Use as a context manager to scope recording; outside any ``with`` block
    operations go to a per-thread default tape that is replaced after it is
    consumed by :func:`backward`.
    """

    records: List[Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False


_local = threading.local()


def _stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.default = Tape()
        _local.grad_enabled = True
    return _local.stack


def current_tape() -> Tape:
    stack = _stack()
    if stack:
        return stack[-1]
    if _local.default.consumed:
        _local.default = Tape()
    return _local.default


def is_grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; forward results carry no gradient."""
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op}: produced NaN or Inf")
    return arr


def record(rule: str, inputs: Sequence[Tensor], out: np.ndarray, saved: Any = None) -> Tensor:
    """Wrap a forward result and log it on the active tape when needed."""
    check_finite(rule, out)
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        _append(Record(rule, tuple(inputs), result, saved))
    return result


def record_multi(rule: str, inputs: Sequence[Tensor], outs: Sequence[np.ndarray], saved: Any = None) -> Tuple[Tensor, ...]:
    """Like :func:`record` for operations with several outputs.

    The backward rule receives a list of output gradients; outputs that did
    not contribute to the loss arrive as zeros.
    """
    for o in outs:
        check_finite(rule, o)
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    results = tuple(Tensor._wrap(o, needs) for o in outs)
    if needs:
        _append(Record(rule, tuple(inputs), results, saved))
    return results


def _append(rec: Record) -> None:
    tape = current_tape()
    if tape.consumed:
        raise StateError("cannot record on a tape that was already consumed by backward()")
    tape.records.append(rec)
    for o in rec.outputs:
        o._tape = tape


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-flagged leaf.

    The tape is consumed: its records are released and a second call raises
    :class:`StateError`.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None:
        raise StateError("loss was not produced through a tape (no operand requires grad)")
    if tape.consumed:
        raise StateError("tape already consumed; re-run the forward pass before calling backward() again")

    produced = {id(o) for r in tape.records for o in r.outputs}
    if id(loss) not in produced:
        raise StateError("loss was not recorded on this tape")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for rec in reversed(tape.records):
        if isinstance(rec.output, tuple):
            gs = [grads.pop(id(o), None) for o in rec.output]
            if all(g is None for g in gs):
                continue
            g = [np.zeros_like(o.data) if gi is None else gi for o, gi in zip(rec.output, gs)]
        else:
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
        needs = tuple(t.requires_grad for t in rec.inputs)
        in_grads = BACKWARD_RULES[rec.rule](rec.saved, g, needs)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.data.shape:
                raise ShapeError(f"{rec.rule}: backward produced {ig.shape} for operand {inp.data.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if key not in produced:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    tape.records.clear()
    tape.consumed = True
