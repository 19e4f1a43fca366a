"""Dense-tensor math with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. While a ``Tape`` is active, every
operation that touches a gradient-requiring tensor records a node with a
backward rule; ``backward`` replays the nodes in reverse record order and
accumulates gradients into the leaf tensors. The tape is rebuilt per
forward pass and cleared after backward.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

_GELU_C = math.sqrt(2.0 / math.pi)

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """Dense float tensor, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: "TapeNode | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule.

    ``backward_fn`` maps the output gradient to per-input gradients
    (``None`` for inputs that do not require grad).
    """

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass (define-by-run)."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn) -> Tensor:
    """Wrap an op result; register a tape node when grads are being traced."""
    tape = _ACTIVE_TAPE
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        node = TapeNode(op, inputs, out, backward_fn)
        out.tape_node = node
        tape.record(node)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Visits the tape exactly once, in reverse record order, then clears it.
    Tensors with ``requires_grad=False`` never receive a grad buffer.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise ContractError("tape already consumed by a previous backward pass")
    tape._consumed = True

    if loss.requires_grad:
        loss._accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp._accumulate_grad(gi.astype(inp.data.dtype, copy=False))
        # intermediate grads are not needed once the node has fired
        if node.output is not loss:
            node.output.grad = None
        node.output.tape_node = None
    tape.nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), out, bw)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bw(g):
        return (g * s,)

    return _record("scale", (a,), out, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; >2-D operands are treated as stacks of matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, bw)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (a,), out, bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return _record("reshape", (a,), out, bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", ts, out, bw)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _record("sum", (a,), out, bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge / n, a.shape).copy(),)

    return _record("mean", (a,), out, bw)


def amax(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient flows to the first argmax per slice."""
    out = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _record("amax", (a,), out, bw)


def diagonal(a: Tensor) -> Tensor:
    """Diagonal of a square matrix."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diagonal needs a square matrix, got {a.shape}")
    out = np.diagonal(a.data).copy()

    def bw(g):
        ga = np.zeros_like(a.data)
        np.fill_diagonal(ga, g)
        return (ga,)

    return _record("diagonal", (a,), out, bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ids may be any integer array shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record("embedding_lookup", (table,), out, bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along ``axis``."""
    if axis >= x.data.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.data.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", (x,), y, bw)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp reduction along ``axis``; gradient is the softmax."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _record("logsumexp", (x,), out, bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (BERT-style)."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
        grad = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t ** 2) * dinner
        return (g * grad,)

    return _record("gelu", (x,), out, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to mean 0 / variance 1, then scale-shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = (gh - gh.mean(axis=-1, keepdims=True)
                  - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) * inv
        return gx, ggamma, gbeta

    return _record("layer_norm", (x, gamma, beta), out, bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero entries with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode requires a seeded rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    factor = 1.0 / (1.0 - p)
    out = x.data * keep * factor

    def bw(g):
        return (g * keep * factor,)

    return _record("dropout", (x,), out, bw)


# ---------------------------------------------------------------------------
# cosine similarity
# ---------------------------------------------------------------------------

def _row_norms(data: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(data, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{what}: zero-norm vector has no cosine direction")
    return norms


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """cos(a, b) for two vectors; raises on zero norm rather than returning 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim needs two equal-length vectors, got {a.shape} and {b.shape}")
    na = _row_norms(a.data, "cosine_sim a")
    nb = _row_norms(b.data, "cosine_sim b")
    ah, bh = a.data / na, b.data / nb
    c = float(ah @ bh)
    out = np.asarray(c, dtype=a.data.dtype)

    def bw(g):
        ga = g * (bh - c * ah) / na if a.requires_grad else None
        gb = g * (ah - c * bh) / nb if b.requires_grad else None
        return ga, gb

    return _record("cosine_sim", (a, b), out, bw)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarities: rows of a [N x d] vs rows of b [M x d]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix needs [N x d] and [M x d], got {a.shape} and {b.shape}")
    na = _row_norms(a.data, "cosine_matrix a")
    nb = _row_norms(b.data, "cosine_matrix b")
    ah, bh = a.data / na, b.data / nb
    c = ah @ bh.T

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = (g @ bh - (g * c).sum(axis=1, keepdims=True) * ah) / na
        if b.requires_grad:
            gt = g.T
            gb = (gt @ ah - (gt * c.T).sum(axis=1, keepdims=True) * bh) / nb
        return ga, gb

    return _record("cosine_matrix", (a, b), c, bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              floor: float = 1e-5) -> float:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Returns the max over parameter elements of
    ``|analytic - cd| / max(|analytic|, |cd|, floor)``. The floor makes
    elements whose true gradient sits at the central-difference noise level
    (~1e-10..1e-9 absolute in 64-bit for O(1) losses) compare absolutely
    instead of blowing up a meaningless quotient. Parameters with
    ``requires_grad=False`` are asserted grad-free and skipped. ``f`` must
    be deterministic (dropout off or seed-pinned).
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)

    max_err = 0.0
    for p in params:
        if not p.requires_grad:
            if p.grad is not None:
                raise ContractError("frozen parameter unexpectedly received a gradient")
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(f().data)
            p.data[idx] = orig - h
            fm = float(f().data)
            p.data[idx] = orig
            cd = (fp - fm) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - cd) / max(abs(a), abs(cd), floor)
            max_err = max(max_err, err)
    return max_err
