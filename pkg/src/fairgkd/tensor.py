"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every operation produces a new :class:`Tensor`. When at least one input
requires a gradient the operation is appended to a :class:`Tape` together
with a closure mapping the output gradient to input gradients. Calling
:func:`backward` on a 1x1 result replays the tape in reverse.

Values are always ``float64`` arrays with exactly two dimensions. The only
broadcast supported is adding a ``1 x k`` row (a bias) to an ``n x k`` matrix.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "no_grad",
    "custom_op",
    "matmul",
    "spmm",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "concat_cols",
    "take_rows",
    "transpose",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "square",
    "row_l2_normalize",
    "sum",
    "mean",
    "backward",
    "Adam",
    "AdamState",
    "glorot_uniform",
    "save_snapshots",
    "load_snapshots",
]


class ShapeError(ValueError):
    """Operands have non-conforming shapes."""


class TapeError(RuntimeError):
    """Invalid use of the differentiation tape."""


_local = threading.local()


def _state():
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.grad_enabled = True
    return _local


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "tape", "node", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got {arr.ndim} dimensions")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.values = arr
        t.requires_grad = False
        t.grad = None
        t.tape = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class _Record:
    # Only leaves are held by reference; recorded outputs and non-leaf inputs
    # are addressed by node index so that a tape never keeps its own tensors
    # alive through a reference cycle.
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: int, inputs: tuple, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager to collect one forward pass::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)

    Outside any context, an operation on leaves opens an implicit tape.
    Implicit tapes that later meet in one operation are merged; explicit
    tapes never mix.
    """

    def __init__(self, implicit: bool = False):
        self.records: list[_Record] = []
        self.implicit = implicit
        # set when this (implicit) tape was merged into another one
        self._target: Tape | None = None
        self._offset = 0

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().stack
        if not stack or stack[-1] is not self:
            raise TapeError("tape contexts exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], fn) -> None:
        spec = []
        for t in inputs:
            if not t.requires_grad:
                spec.append(None)
            elif t.tape is None:
                spec.append((None, t, t.shape))
            else:
                tape, node = _locate(t)
                if tape is not self:
                    raise TapeError("input belongs to another tape")
                spec.append((node, None, t.shape))
        out.tape = self
        out.node = len(self.records)
        self.records.append(_Record(out.node, tuple(spec), fn))

    def _absorb(self, other: "Tape") -> None:
        offset = len(self.records)

        def shift(entry):
            if entry is None or entry[0] is None:
                return entry
            return (entry[0] + offset, None, entry[2])

        for rec in other.records:
            self.records.append(_Record(rec.out + offset, tuple(map(shift, rec.inputs)), rec.fn))
        other.records = []
        other._target, other._offset = self, offset

    def backward(self, root: Tensor) -> None:
        if root.tape is None or _locate(root)[0] is not self:
            raise TapeError("root tensor was not recorded on this tape")
        backward(root)


def _locate(t: Tensor) -> tuple[Tape, int]:
    tape, node = t.tape, t.node
    while tape._target is not None:
        node += tape._offset
        tape = tape._target
    return tape, node


def _resolve_tape(inputs: Sequence[Tensor]) -> Tape:
    tapes: list[Tape] = []
    for t in inputs:
        if t.tape is not None:
            tape = _locate(t)[0]
            if all(tape is not u for u in tapes):
                tapes.append(tape)
    stack = _state().stack
    active = stack[-1] if stack else None
    if active is not None:
        if any(t is not active for t in tapes):
            raise TapeError("input belongs to a tape other than the active one")
        return active
    if not tapes:
        return Tape(implicit=True)
    if len(tapes) > 1 and not all(t.implicit for t in tapes):
        raise TapeError("inputs were recorded on different tapes")
    head = tapes[0]
    for other in tapes[1:]:
        head._absorb(other)
    return head


def custom_op(
    values: np.ndarray,
    inputs: Sequence[Tensor],
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap precomputed ``values`` as the output of a differentiable op.

    ``grad_fn`` receives the output gradient and returns one gradient (or
    ``None``) per input, in order; entries for inputs that do not require a
    gradient are ignored. ``grad_fn`` must not capture the input tensors
    themselves, only their arrays or flags.
    """
    if values.ndim != 2:
        raise ShapeError("op output must be 2-D")
    out = Tensor._wrap(values)
    if not _state().grad_enabled or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    _resolve_tape(inputs).record(out, inputs, grad_fn)
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that
    requires a gradient."""
    if root.shape != (1, 1):
        raise TapeError(f"backward needs a scalar root, got {root.shape}")
    if root.tape is None or not root.requires_grad:
        raise TapeError("root is detached from any tape")
    tape, start = _locate(root)
    records = tape.records
    grads: dict[int, np.ndarray] = {start: np.ones((1, 1))}
    for rec in reversed(records[: start + 1]):
        g = grads.pop(rec.out, None)
        if g is None:
            continue
        in_grads = rec.fn(g)
        for spec, ig in zip(rec.inputs, in_grads):
            if spec is None or ig is None:
                continue
            node, leaf, shape = spec
            if ig.shape != shape:
                raise TapeError(f"gradient shape {ig.shape} != input shape {shape}")
            if leaf is not None:
                leaf.grad = ig.copy() if leaf.grad is None else leaf.grad + ig
            else:
                grads[node] = ig if node not in grads else grads[node] + ig


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (g @ bv.T if need_a else None, av.T @ g if need_b else None)

    return custom_op(av @ bv, (a, b), grad_fn)


def spmm(s: sp.spmatrix, d: Tensor) -> Tensor:
    """Sparse (constant) times dense tensor."""
    if s.shape[1] != d.rows:
        raise ShapeError(f"spmm {s.shape} @ {d.shape}")
    s = sp.csr_matrix(s)

    def grad_fn(g):
        return (np.asarray(s.T @ g),)

    return custom_op(np.asarray(s @ d.values), (d,), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a ``1 x cols`` row (bias)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return custom_op(a.values + b.values, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        need_b = b.requires_grad
        return custom_op(
            a.values + b.values,
            (a, b),
            lambda g: (g, g.sum(axis=0, keepdims=True) if need_b else None),
        )
    raise ShapeError(f"add {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub {a.shape} - {b.shape}")
    return custom_op(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return custom_op(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op(a.values * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.values, (a,), lambda g: (-g,))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_cols of nothing")
    n = tensors[0].rows
    if any(t.rows != n for t in tensors):
        raise ShapeError("concat_cols needs equal row counts")
    bounds = np.cumsum([0] + [t.cols for t in tensors])
    k = len(tensors)

    def grad_fn(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(k)]

    return custom_op(np.concatenate([t.values for t in tensors], axis=1), tensors, grad_fn)


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("row index must be 1-D")
    n = a.rows

    def grad_fn(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return custom_op(a.values[idx], (a,), grad_fn)


def transpose(a: Tensor) -> Tensor:
    return custom_op(a.values.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return custom_op(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return custom_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return custom_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise ValueError("log of a non-positive entry")
    x = a.values
    return custom_op(np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.values
    return custom_op(x * x, (a,), lambda g: (2.0 * g * x,))


def row_l2_normalize(a: Tensor, allow_zero: bool = False) -> Tensor:
    """Scale every row to unit length.

    Zero rows are an error unless ``allow_zero``; then they stay zero and
    pass their incoming gradient through unchanged.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", a.values, a.values))[:, None]
    if np.any(norms == 0):
        if not allow_zero:
            raise ValueError("cannot L2-normalize a zero row")
        norms = np.where(norms == 0, 1.0, norms)
    z = a.values / norms

    def grad_fn(g):
        return ((g - z * np.einsum("ij,ij->i", g, z)[:, None]) / norms,)

    return custom_op(z, (a,), grad_fn)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return custom_op(np.array([[a.values.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    k = float(a.values.size)
    return custom_op(
        np.array([[a.values.sum() / k]]), (a,), lambda g: (np.full(shape, g[0, 0] / k),)
    )


# ---------------------------------------------------------------------------
# optimisation


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class AdamState:
    """Moment buffers and step counter for one parameter set."""

    def __init__(self, shapes: Iterable[tuple[int, int]]):
        shapes = list(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0


class Adam:
    """Adam with coupled (L2-style) weight decay.

    The decay term ``weight_decay * param`` is added to the gradient before
    the moment updates, as in the classic formulation.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState(p.shape for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise TapeError("parameter has no gradient; run backward first")
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1 ** st.step
        bc2 = 1.0 - self.beta2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# snapshots

_HEADER = struct.Struct("<QQ")


def save_snapshots(path: str | Path, arrays: Sequence[np.ndarray]) -> None:
    """Write matrices back to back: ``<rows u64><cols u64><row-major f64 ...>``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for arr in arrays:
            arr = np.asarray(arr, dtype="<f8")
            if arr.ndim != 2:
                raise ShapeError("snapshots are 2-D")
            fh.write(_HEADER.pack(*arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    tmp.replace(path)


def load_snapshots(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(data):
        if pos + _HEADER.size > len(data):
            raise ValueError(f"{path}: truncated snapshot header")
        rows, cols = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated snapshot body")
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos)
        out.append(arr.reshape(rows, cols).astype(np.float64))
        pos += nbytes
    return out
