"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the attention / convolution networks need are provided.
Every op returns a new :class:`Tensor`; when any input requires gradients and
a :class:`Tape` is active, the op is recorded so that :func:`backward` can
replay it in reverse.

Example:
    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = sum_all(mul(w, w))
    ...     backward(loss)
    >>> w.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class Tensor:
    """A dense n-dimensional float64 value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape_id: Optional[tuple[int, int]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops.

    Used as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are appended in execution order, which is a
    valid topological order by construction.
    """

    _ids = iter(range(1, 1 << 62))

    def __init__(self) -> None:
        self.id = next(Tape._ids)
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, op, inputs, output, backward_fn) -> None:
        output.tape_id = (self.id, len(self.nodes))
        self.nodes.append(_Node(op, tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if loss.tape_id is None or loss.tape_id[0] != self.id:
            raise ContractError("loss was not recorded on this tape")
        end = loss.tape_id[1]
        # intermediate buffers are local to one sweep; leaves accumulate.
        for node in self.nodes[: end + 1]:
            node.output.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes[: end + 1]):
            g = node.output.grad
            if g is None:
                continue
            for inp, gin in zip(node.inputs, node.backward(g)):
                if gin is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    # take ownership of fresh arrays; copy anything that may alias
                    if gin is g or gin.base is not None or not gin.flags.writeable:
                        gin = gin.copy()
                    inp.grad = gin.reshape(inp.shape)
                else:
                    inp.grad += gin.reshape(inp.shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    tape = active_tape()
    if tape is None or loss.tape_id is None or loss.tape_id[0] != tape.id:
        raise ContractError("loss is not on the active tape")
    tape.backward(loss)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(op, inputs, out, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _indicator(index: np.ndarray, n: int) -> sp.csr_matrix:
    """Sparse ``[n, len(index)]`` matrix with a one at ``(index[e], e)``."""
    e = index.size
    return sp.csr_matrix((np.ones(e), (index, np.arange(e))), shape=(n, e))


def _scatter_rows(values: np.ndarray, index: np.ndarray, n: int, ind=None) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``index``."""
    if ind is None:
        ind = _indicator(index, n)
    flat = values.reshape(values.shape[0], -1)
    return np.asarray(ind @ flat).reshape((n,) + values.shape[1:])


def _segment_max(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    perm = np.argsort(index, kind="stable")
    sorted_idx = index[perm]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out = np.full((n,) + values.shape[1:], -np.inf)
    out[sorted_idx[starts]] = np.maximum.reduceat(values[perm], starts, axis=0)
    return out


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make("matmul", A @ B, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over rows of ``a``."""
    if a.shape == b.shape:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _make("add_row", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shape mismatch: {list(a.shape)} + {list(b.shape)}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {list(a.shape)} * {list(b.shape)}")
    A, B = a.data, b.data
    return _make("mul", A * B, (a, b), lambda g: (g * B, g * A))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    X = x.data
    out = np.where(X > 0, X, slope * X)
    return _make("leaky_relu", out, (x,), lambda g: (np.where(X > 0, g, slope * g),))


def elu(x: Tensor) -> Tensor:
    X = x.data
    neg = np.expm1(np.minimum(X, 0.0))
    out = np.where(X > 0, X, neg)
    return _make("elu", out, (x,), lambda g: (np.where(X > 0, g, g * (neg + 1.0)),))


def identity(x: Tensor) -> Tensor:
    return x


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation of 2-D tensors with equal row counts."""
    if not parts:
        raise ContractError("concat_features needs at least one part")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_features row mismatch: {[list(p.shape) for p in parts]}")
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=1))

    return _make("concat", np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


# ---------------------------------------------------------------------------
# graph (segment) operations


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[index]``; the backward pass scatter-adds into ``x``."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    return _make("take_rows", x.data[index], (x,), lambda g: (_scatter_rows(g, index, n),))


def gather_sum(terms: Sequence[tuple[Tensor, Optional[np.ndarray]]]) -> Tensor:
    """Sum of row-gathered tensors: ``sum_k x_k[index_k]`` (``None`` index keeps ``x_k`` as is)."""
    idx = [None if i is None else np.asarray(i, dtype=np.int64) for _, i in terms]
    tensors = tuple(t for t, _ in terms)
    rows = {t.shape[0] if i is None else i.size for t, i in zip(tensors, idx)}
    widths = {t.shape[1:] for t in tensors}
    if len(rows) != 1 or len(widths) != 1:
        raise ShapeError(f"gather_sum shape mismatch: {[list(t.shape) for t in tensors]}")
    out = None
    for t, i in zip(tensors, idx):
        part = t.data if i is None else t.data[i]
        out = part.copy() if out is None else out.__iadd__(part)

    def bw(g):
        return tuple(
            (g.copy() if i is None else _scatter_rows(g, i, t.shape[0])) if t.requires_grad else None
            for t, i in zip(tensors, idx)
        )

    return _make("gather_sum", out, tensors, bw)


def _check_segments(segments, length: int, num_segments: Optional[int]) -> tuple[np.ndarray, int]:
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (length,):
        raise ShapeError(f"need {length} segment ids, got shape {list(seg.shape)}")
    n = int(seg.max()) + 1 if num_segments is None and seg.size else (num_segments or 0)
    if seg.size and (seg.min() < 0 or seg.max() >= n):
        raise IndexError(f"segment id out of range for {n} segments")
    return seg, n


def segment_softmax(scores: Tensor, segments, num_segments: Optional[int] = None) -> Tensor:
    """Softmax over entries sharing a segment id.

    ``scores`` is ``[E]`` or ``[E, H]``; for 2-D input each column (head) is
    normalised independently.
    """
    S = scores.data
    if S.shape[0] == 0:
        return _make("segment_softmax", S.copy(), (scores,), lambda g: (g,))
    seg, n = _check_segments(segments, S.shape[0], num_segments)
    peak = _segment_max(S, seg, n)
    ex = np.exp(S - peak[seg])
    ind = _indicator(seg, n)
    total = _scatter_rows(ex, seg, n, ind)
    Y = ex / total[seg]

    def bw(g):
        dot = _scatter_rows(g * Y, seg, n, ind)
        return (Y * (g - dot[seg]),)

    return _make("segment_softmax", Y, (scores,), bw)


def segment_weighted_sum(
    weights: Tensor, values: Tensor, segments, num_segments: int
) -> Tensor:
    """Row ``i`` of the result is the sum of ``weight * value`` over entries in segment ``i``.

    Args:
        weights: ``[E]`` or ``[E, H]``. With ``H`` columns, ``values`` is read as
            ``H`` consecutive blocks of equal width, one per column.
        values: ``[E, F]``.
        segments: destination id per entry.
        num_segments: number of output rows.
    """
    W, V = weights.data, values.data
    if V.ndim != 2 or W.shape[0] != V.shape[0]:
        raise ShapeError(
            f"segment_weighted_sum length mismatch: {list(W.shape)} vs {list(V.shape)}"
        )
    seg, n = _check_segments(segments, V.shape[0], num_segments)
    E, F = V.shape
    heads = 1 if W.ndim == 1 else W.shape[1]
    if F % heads:
        raise ShapeError(f"value width {F} not divisible into {heads} heads")
    W3 = W.reshape(E, heads, 1)
    V3 = V.reshape(E, heads, F // heads)
    out = _scatter_rows((W3 * V3).reshape(E, F), seg, n)

    def bw(g):
        g3 = g[seg].reshape(E, heads, F // heads)
        gw = (g3 * V3).sum(axis=2).reshape(W.shape) if weights.requires_grad else None
        gv = (g3 * W3).reshape(E, F) if values.requires_grad else None
        return gw, gv

    return _make("segment_weighted_sum", out, (weights, values), bw)


def grouped_dot(z: Tensor, a: Tensor, heads: int) -> Tensor:
    """Per-head inner product: ``[E, H*F] . [H*F] -> [E, H]``."""
    Z, A = z.data, a.data
    if Z.ndim != 2 or A.shape != (Z.shape[1],) or Z.shape[1] % heads:
        raise ShapeError(f"grouped_dot shape mismatch: {list(Z.shape)} . {list(A.shape)}")
    E, HF = Z.shape
    Z3 = Z.reshape(E, heads, HF // heads)
    A2 = A.reshape(heads, HF // heads)
    out = (Z3 * A2).sum(axis=2)

    def bw(g):
        gz = (g[:, :, None] * A2).reshape(E, HF)
        ga = (g[:, :, None] * Z3).sum(axis=0).reshape(HF)
        return gz, ga

    return _make("grouped_dot", out, (z, a), bw)


def mean_heads(x: Tensor, heads: int) -> Tensor:
    """Average ``H`` consecutive column blocks: ``[N, H*F] -> [N, F]``."""
    X = x.data
    N, HF = X.shape
    if HF % heads:
        raise ShapeError(f"width {HF} not divisible into {heads} heads")
    F = HF // heads
    out = X.reshape(N, heads, F).mean(axis=1)
    return _make(
        "mean_heads",
        out,
        (x,),
        lambda g: (np.broadcast_to(g[:, None, :] / heads, (N, heads, F)).reshape(N, HF),),
    )


def mean_rows(x: Tensor, groups, num_groups: Optional[int] = None) -> Tensor:
    """Per-group mean of rows. Every group must own at least one row."""
    grp = np.asarray(groups, dtype=np.int64)
    n = int(grp.max()) + 1 if num_groups is None else num_groups
    counts = np.bincount(grp, minlength=n).astype(np.float64)
    if np.any(counts == 0):
        raise ContractError(f"empty group(s) in mean_rows: {np.flatnonzero(counts == 0).tolist()}")
    out = _scatter_rows(x.data, grp, n) / counts[:, None]
    return _make("mean_rows", out, (x,), lambda g: ((g / counts[:, None])[grp],))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {list(pred.shape)} vs {list(target.shape)}")
    R = pred.data - target.data
    n = R.size
    out = np.asarray(np.mean(R * R))
    return _make("mse", out, (pred, target), lambda g: (2.0 * g * R / n, -2.0 * g * R / n))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ContractError("parameter count differs from optimizer state")
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ContractError(f"parameter shape {list(p.shape)} drifted from state {list(m.shape)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a fixed parameter list, reading gradients from ``.grad``."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
