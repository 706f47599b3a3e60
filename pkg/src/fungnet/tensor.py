"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` is opened as a context manager; every operation executed
while it is active, and that touches a tensor with ``requires_grad``, appends
a record holding its inputs, its output and a closure that maps the output
gradient to input gradients. :func:`backward` walks the records in reverse.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    >>> backward(loss, tape)
    >>> w.grad
    array([2., 4.], dtype=float32)

Without an active tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "fungnet_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class GradCheckError(ArithmeticError):
    pass


class Tensor:
    """Row-major numeric array with an optional gradient buffer.

    ``data`` is a numpy array of float32 or float64. Anything else handed to
    the constructor is converted to float32.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor_from(values: Sequence[float], shape: Sequence[int], dtype=np.float32) -> Tensor:
    """Build a tensor from a flat row-major value list."""
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    flat = np.asarray(values, dtype=dtype).reshape(-1)
    expected = int(np.prod(shape, dtype=np.int64))
    if flat.size != expected:
        raise ValueError(f"expected {expected} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise ValueError("tensor values must be finite")
    return Tensor(flat.reshape(shape))


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major offset of ``index`` inside ``shape``."""
    offset = 0
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of bounds for shape {tuple(shape)}")
        offset = offset * d + i
    return offset


@dataclass(eq=False)
class Record:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[Record] = []
        self._produced: set[int] = set()
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: Record) -> None:
        self.records.append(record)
        self._produced.add(id(record.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap ``out_data`` and log it on the active tape when gradients are needed.

    ``backward_fn`` receives the output gradient and returns one entry per
    input (``None`` for inputs that take no gradient).
    """
    out = Tensor(out_data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.append(Record(kind, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar (rank-0) loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not recorded on this tape")
    if not np.isfinite(loss.data):
        raise ContractError(f"loss is not finite: {loss.item()}")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if not tape.produced(t):
                leaves[key] = t
            prev = pending.get(key)
            pending[key] = gi if prev is None else prev + gi
    for key, t in leaves.items():
        g = pending[key].astype(t.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape."""
    b = _as_tensor(b, a)
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a tensor of the same shape or a number."""
    if not isinstance(b, Tensor):
        c = float(b)
        return record("scale", (a,), a.data * c, lambda g: (g * c,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return record("matmul", (a, b), ad @ bd, back)


def sum_(a: Tensor) -> Tensor:
    """Sum of all entries as a rank-0 tensor."""
    shape = a.shape
    return record("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return mul(sum_(a), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(a, (a.shape[0], -1))


def grad_check(op: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``op`` output is summed to a scalar. Inputs must be float64; each entry is
    perturbed by ``+-step`` in turn.
    """
    for i, t in enumerate(inputs):
        if t.dtype != np.float64:
            raise ContractError(f"grad_check input {i} must be float64, got {t.dtype}")
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]

    with Tape() as tape:
        out = op(*leaves)
        bad = np.flatnonzero(~np.isfinite(out.data))
        if bad.size:
            raise GradCheckError(f"non-finite op output at entry {int(bad[0])}")
        loss = sum_(out)
    backward(loss, tape)

    def evaluate() -> float:
        return float(np.sum(op(*leaves).data))

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros(leaf.size)
        flat = leaf.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = evaluate()
            flat[idx] = orig - step
            fm = evaluate()
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite output while perturbing input {k} entry {idx}")
            fd = (fp - fm) / (2 * step)
            a = float(analytic[idx])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
