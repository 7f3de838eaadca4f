"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the recorded graph once, in reverse
topological order.

Broadcasting is deliberately limited to adding a row vector to a matrix;
anything else needs an explicit :func:`reshape`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AggregationError, DimensionError

DTYPE = np.float64


class Tensor:
    """Dense float64 array with an optional gradient.

    The underlying buffer is read-only; operations always allocate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf",
                 _owned: bool = False):
        if _owned and isinstance(data, np.ndarray) and data.dtype == DTYPE:
            arr = data
        else:
            arr = np.array(data, dtype=DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the buffer."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff ------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every tracked ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: the only place gradients are stored
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; each node is emitted once, after all of its parents.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    return Tensor(np.require(data, dtype=DTYPE, requirements="C"), requires_grad=tracked,
                  _parents=tuple(parents) if tracked else (), _backward=backward if tracked else None,
                  op=op, _owned=True)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_row")
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ----------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m, k) tensor with a (k, n) matrix or a (k,) vector."""
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 1:
        return _make(ad @ bd, (a, b), lambda g: (np.outer(g, bd), ad.T @ g), "matvec")
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def batched_matvec(q: Tensor, x: Tensor) -> Tensor:
    """Row-wise ``q[e] @ x[e]`` for q of shape (E, m, n) and x of shape (E, n)."""
    if q.ndim != 3 or x.ndim != 2 or q.shape[0] != x.shape[0] or q.shape[2] != x.shape[1]:
        raise DimensionError(f"batched_matvec: cannot apply {q.shape} to {x.shape}")
    qd, xd = q.data, x.data
    out = np.matmul(qd, xd[:, :, None])[:, :, 0]

    def backward(g):
        return g[:, :, None] * xd[:, None, :], np.matmul(g[:, None, :], qd)[:, 0, :]

    return _make(out, (q, x), backward, "batched_matvec")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise AggregationError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: {ref} vs {x.shape}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, backward, "concat")


def gather(a: Tensor, index) -> Tensor:
    """Select rows of ``a``; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.int64)
    n_rows = a.shape[0]

    def backward(g):
        out = np.zeros((n_rows,) + g.shape[1:], dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "gather")


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reduce(xs: Sequence[Tensor], mode: str = "mean") -> Tensor:
    """Elementwise mean/max/sum over a list of equally-shaped tensors.

    For ``max`` the gradient goes to the first list entry holding the maximum.
    """
    if not xs:
        raise AggregationError(f"{mode}-reduce of an empty list")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape != ref:
            raise DimensionError(f"reduce: shape {x.shape} differs from {ref}")
    stacked = np.stack([x.data for x in xs])
    k = len(xs)
    if mode == "sum":
        return _make(stacked.sum(axis=0), xs, lambda g: tuple(g for _ in range(k)), "reduce_sum")
    if mode == "mean":
        # sorting first makes the result bitwise independent of list order
        out = np.mean(np.sort(stacked, axis=0), axis=0)
        return _make(out, xs, lambda g: tuple(g / k for _ in range(k)), "reduce_mean")
    if mode == "max":
        winner = np.argmax(stacked, axis=0)  # first occurrence on ties

        def backward(g):
            return tuple(np.where(winner == i, g, 0.0) for i in range(k))

        return _make(stacked.max(axis=0), xs, backward, "reduce_max")
    raise ValueError(f"unknown reduce mode {mode!r}")


def segment_reduce(x: Tensor, segments, num_segments: int, mode: str = "mean") -> Tensor:
    """Reduce rows of ``x`` (E, m) into ``num_segments`` groups given per-row segment ids.

    This is the index-matrix aggregation used by the message-passing layers.
    Every segment must own at least one row. Ties under ``max`` route the
    gradient to the lowest row index of the segment.
    """
    seg = np.asarray(segments, dtype=np.int64)
    if x.ndim != 2 or seg.shape != (x.shape[0],):
        raise DimensionError(f"segment_reduce: rows {x.shape} vs segment ids {seg.shape}")
    counts = np.bincount(seg, minlength=num_segments).astype(DTYPE)
    if counts.shape[0] != num_segments or np.any(counts == 0):
        raise AggregationError("segment_reduce: every segment needs at least one member")
    width = x.shape[1]
    if mode == "sum" or mode == "mean":
        out = np.zeros((num_segments, width), dtype=DTYPE)
        np.add.at(out, seg, x.data)
        if mode == "sum":
            return _make(out, (x,), lambda g: (g[seg],), "segment_sum")
        out /= counts[:, None]
        return _make(out, (x,), lambda g: (g[seg] / counts[seg][:, None],), "segment_mean")
    if mode == "max":
        out = np.full((num_segments, width), -np.inf, dtype=DTYPE)
        np.maximum.at(out, seg, x.data)
        hit = x.data == out[seg]
        # keep only the first hit per (segment, column)
        rows = np.arange(x.shape[0])
        first = np.full((num_segments, width), x.shape[0], dtype=np.int64)
        cand = np.where(hit, rows[:, None], x.shape[0])
        np.minimum.at(first, seg, cand)
        winner = rows[:, None] == first[seg]

        def backward(g):
            return (np.where(winner, g[seg], 0.0),)

        return _make(out, (x,), backward, "segment_max")
    raise ValueError(f"unknown aggregation mode {mode!r}")


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(z, dtype=DTYPE)))


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a single logit vector."""
    if logits.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy expects a vector, got {logits.shape}")
    c = logits.shape[0]
    if not 0 <= int(target) < c:
        raise IndexError(f"target {target} outside [0, {c})")
    t = int(target)
    logp = _log_softmax(logits.data)

    def backward(g):
        grad = np.exp(logp)
        grad[t] -= 1.0
        return (grad * float(g),)

    return _make(np.array(-logp[t]), (logits,), backward, "softmax_xent")


def cross_entropy_rows(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of per-row cross-entropies for logits of shape (N, C).

    Rows with zero weight are ignored; the mean is over the total weight.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_rows expects (N, C), got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise DimensionError(f"targets shape {t.shape} does not match {n} rows")
    if n and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"targets outside [0, {c})")
    w = np.ones(n, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    total = w.sum()
    if total <= 0:
        raise AggregationError("cross_entropy_rows: no row carries weight")
    logp = _log_softmax(logits.data)
    picked = logp[np.arange(n), t]
    loss = -(w * picked).sum() / total

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), t] -= 1.0
        return (grad * (w / total)[:, None] * float(g),)

    return _make(np.array(loss), (logits,), backward, "xent_rows")


# ----------------------------------------------------------------------
# MLPs
# ----------------------------------------------------------------------

@dataclass
class MlpParams:
    """Affine layers ``x @ W + b`` with ReLU between them (none after the last)."""

    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.in_width] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def init(cls, widths: Sequence[int], rng: np.random.Generator, final_gain: float = 1.0) -> "MlpParams":
        """Uniform fan-in init: weights in ±sqrt(6/fan_in), zero biases."""
        ws, bs = [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if fan_in <= 0 or fan_out <= 0:
                raise ValueError(f"MLP widths must be positive, got {list(widths)}")
            bound = np.sqrt(6.0 / fan_in)
            if i == len(widths) - 2:
                bound *= final_gain
            ws.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
            bs.append(Tensor(np.zeros(fan_out), requires_grad=True))
        return cls(ws, bs)


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    vector = x.ndim == 1
    h = reshape(x, (1, x.shape[0])) if vector else x
    if h.shape[1] != params.in_width:
        raise DimensionError(f"MLP expects input width {params.in_width}, got {h.shape[1]}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, w), b)
        if i < last:
            h = relu(h)
    return reshape(h, (h.shape[1],)) if vector else h


# ----------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------

def numeric_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``param``.

    ``param`` is perturbed in place through its buffer, so ``fn`` must read
    it afresh on every call.
    """
    buf = param.data
    buf.flags.writeable = True
    grad = np.zeros_like(buf)
    flat, gflat = buf.reshape(-1), grad.reshape(-1)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    finally:
        buf.flags.writeable = False
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative discrepancy between two gradient arrays."""
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    scale_ = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale_)


def parameters_of(items: Iterable) -> list[Tensor]:
    out: list[Tensor] = []
    for item in items:
        out.extend(item.parameters())
    return out
