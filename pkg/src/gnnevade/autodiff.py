"""Dense float64 matrix math with reverse-mode automatic differentiation.

Everything is a 2-D float64 matrix with an explicit shape; there is no
broadcasting. Operations execute eagerly in numpy and, when an operand
requires gradients, record a backward rule on a Tape. ``Tape.backward``
replays the records in reverse and accumulates exact gradients for any
registered leaf, including the per-edge weight slots of a
:class:`SparseWeightedAdj`, which is what lets a single backward pass
produce gradients for every candidate edge of a structure attack.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Raised for misuse of the tape machinery."""


class ShapeError(AutodiffError):
    """Raised when operand shapes are incompatible."""


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A 2-D float64 matrix, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "requires_grad")

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a (1, 1) matrix, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    """An untracked matrix. Input values must be finite."""
    t = Tensor(data)
    if not np.isfinite(t.data).all():
        raise AutodiffError("constant holds non-finite values")
    return t


# A backward rule is (input tensor, fn mapping upstream grad -> grad piece).
_Part = tuple[Tensor, Callable[[np.ndarray], np.ndarray]]


class Tape:
    """Ordered record of primitive ops for one forward computation.

    Records are appended in execution order, so they are topologically
    ordered by construction; the backward pass visits each record exactly
    once, in reverse.
    """

    __slots__ = ("_records", "_leaf_ids")

    def __init__(self):
        self._records: list[tuple[Tensor, list[_Part]]] = []
        self._leaf_ids: set[int] = set()

    def leaf(self, data) -> Tensor:
        """Register a differentiable input slot holding ``data``."""
        t = Tensor(data, self, requires_grad=True)
        if not np.isfinite(t.data).all():
            raise AutodiffError("leaf holds non-finite values")
        self._leaf_ids.add(id(t))
        return t

    def _record(self, out: Tensor, parts: list[_Part]) -> None:
        self._records.append((out, parts))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Exact reverse-mode gradients of a scalar ``loss`` for each of ``wrt``.

        Slots not on any path from the loss receive zeros. Requesting a
        tensor that was never registered as a leaf on this tape is an error.
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be (1, 1), got {loss.shape}")
        if loss.tape is not self:
            raise AutodiffError("loss was not computed on this tape")
        for t in wrt:
            if id(t) not in self._leaf_ids:
                raise AutodiffError("gradient requested for a slot not registered on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for out, parts in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, rule in parts:
                if not t.requires_grad:
                    continue
                piece = rule(g)
                prev = grads.get(id(t))
                grads[id(t)] = piece if prev is None else prev + piece
        return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]


def _make(out_data: np.ndarray, parts: list[_Part]) -> Tensor:
    tapes = {t.tape for t, _ in parts if t.tape is not None}
    if len(tapes) > 1:
        raise AutodiffError("operands were recorded on different tapes")
    tape = tapes.pop() if tapes else None
    needs = any(t.requires_grad for t, _ in parts)
    out = Tensor(out_data, tape, needs)
    if tape is not None and needs:
        tape._record(out, parts)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. dA = G @ B^T, dB = A^T @ G."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return _make(a.data @ b.data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return _make(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a (1, M) row vector to every row of an (N, M) matrix."""
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError(f"add_row: {a.shape} + {row.shape}")
    return _make(a.data + row.data, [
        (a, lambda g: g),
        (row, lambda g: g.sum(axis=0, keepdims=True)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    return _make(a.data * b.data, [
        (a, lambda g: g * b.data),
        (b, lambda g: g * a.data),
    ])


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, [(a, lambda g: g * c)])


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, [(a, lambda g: g)])


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def rsqrt(a: Tensor) -> Tensor:
    """Elementwise x^(-1/2). Inputs must be strictly positive."""
    if not (a.data > 0.0).all():
        raise AutodiffError("rsqrt requires strictly positive inputs")
    out = 1.0 / np.sqrt(a.data)
    return _make(out, [(a, lambda g: g * (-0.5 * out ** 3))])


def recip_or_zero(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Elementwise 1/x where x > eps, else 0 (and zero gradient there)."""
    mask = a.data > eps
    out = np.where(mask, 1.0 / np.where(mask, a.data, 1.0), 0.0)
    return _make(out, [(a, lambda g: g * np.where(mask, -out * out, 0.0))])


def row_scale(a: Tensor, s: Tensor) -> Tensor:
    """Scale row i of an (N, D) matrix by s[i, 0]."""
    if s.shape != (a.rows, 1):
        raise ShapeError(f"row_scale: {a.shape} scaled by {s.shape}")
    return _make(a.data * s.data, [
        (a, lambda g: g * s.data),
        (s, lambda g: (g * a.data).sum(axis=1, keepdims=True)),
    ])


def scale_t(a: Tensor, s: Tensor) -> Tensor:
    """Scale a whole matrix by a differentiable (1, 1) scalar."""
    if s.shape != (1, 1):
        raise ShapeError(f"scale_t: scalar must be (1, 1), got {s.shape}")
    sv = s.data[0, 0]
    return _make(a.data * sv, [
        (a, lambda g: g * sv),
        (s, lambda g: np.array([[np.sum(g * a.data)]])),
    ])


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows a[idx]; the gradient scatter-adds back into a."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g: np.ndarray) -> np.ndarray:
        z = np.zeros(a.shape)
        np.add.at(z, idx, g)
        return z

    return _make(a.data[idx], [(a, back)])


def scatter_sum(vals: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """out[idx[e]] += vals[e]; rows of the output not indexed stay zero."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) != vals.rows:
        raise ShapeError("scatter_sum: index length must match value rows")
    out = np.zeros((n, vals.cols))
    np.add.at(out, idx, vals.data)
    return _make(out, [(vals, lambda g: g[idx])])


def vstack(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.cols:
        raise ShapeError(f"vstack: column counts differ, {a.shape} vs {b.shape}")
    ra = a.rows
    return _make(np.vstack([a.data, b.data]), [
        (a, lambda g: g[:ra]),
        (b, lambda g: g[ra:]),
    ])


def take_row(a: Tensor, i: int) -> Tensor:
    if not 0 <= i < a.rows:
        raise IndexError(f"row {i} out of range for {a.shape}")

    def back(g: np.ndarray) -> np.ndarray:
        z = np.zeros(a.shape)
        z[i] = g[0]
        return z

    return _make(a.data[i : i + 1].copy(), [(a, back)])


def add_rows_at(base: Tensor, delta: Tensor, rows: np.ndarray) -> Tensor:
    """Copy ``base`` and add delta[k] into row rows[k] of the copy."""
    rows = np.asarray(rows, dtype=np.int64)
    if delta.shape != (len(rows), base.cols):
        raise ShapeError(f"add_rows_at: delta {delta.shape} for {len(rows)} rows of {base.shape}")
    out = base.data.copy()
    np.add.at(out, rows, delta.data)
    return _make(out, [
        (base, lambda g: g),
        (delta, lambda g: g[rows]),
    ])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a raw (N, Y) array."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] of a single (1, Y) row.

    Gradient on the row is softmax - onehot(label).
    """
    if logits.rows != 1:
        raise ShapeError(f"cross_entropy takes a single row, got {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.cols:
        raise IndexError(f"label {label} out of range for {logits.cols} classes")
    row = logits.data[0]
    m = row.max()
    lse = m + np.log(np.exp(row - m).sum())
    p = softmax(logits.data)

    def back(g: np.ndarray) -> np.ndarray:
        grad = p.copy()
        grad[0, label] -= 1.0
        return grad * g[0, 0]

    return _make(np.array([[lse - row[label]]]), [(logits, back)])


def cross_entropy_sum(logits: Tensor, rows: np.ndarray, labels: np.ndarray) -> Tensor:
    """Sum of per-row cross-entropies over selected rows of an (N, Y) matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(rows) != len(labels):
        raise ShapeError("cross_entropy_sum: rows and labels differ in length")
    if len(rows) == 0:
        raise ShapeError("cross_entropy_sum: empty row selection")
    if labels.min() < 0 or labels.max() >= logits.cols:
        raise IndexError(f"label out of range for {logits.cols} classes")
    sel = logits.data[rows]
    m = sel.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(sel - m).sum(axis=1))
    losses = lse - sel[np.arange(len(rows)), labels]
    p = softmax(sel)

    def back(g: np.ndarray) -> np.ndarray:
        grad_rows = p.copy()
        grad_rows[np.arange(len(rows)), labels] -= 1.0
        z = np.zeros(logits.shape)
        np.add.at(z, rows, grad_rows * g[0, 0])
        return z

    return _make(np.array([[losses.sum()]]), [(logits, back)])


def cross_entropy_mean(logits: Tensor, rows: np.ndarray, labels: np.ndarray) -> Tensor:
    return scale(cross_entropy_sum(logits, rows, labels), 1.0 / len(np.asarray(rows)))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.array([[a.data.sum()]]), [(a, lambda g: np.full(a.shape, g[0, 0]))])


# ---------------------------------------------------------------------------
# sparse weighted adjacency


class SparseWeightedAdj:
    """Adjacency entries whose weights are differentiable slots.

    Entry e aggregates from ``src[e]`` into ``dst[e]`` with weight
    ``slots[slot_index[e]]``; several entries may reference one slot (an
    undirected edge aggregated in both directions keeps a single weight).
    """

    __slots__ = ("n", "src", "dst", "slots", "slot_index")

    def __init__(self, n: int, src, dst, slots: Tensor, slot_index):
        self.n = int(n)
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.slots = slots
        self.slot_index = np.asarray(slot_index, dtype=np.int64)
        if self.src.shape != self.dst.shape or self.src.shape != self.slot_index.shape:
            raise ShapeError("adjacency arrays must share one length")
        if len(self.src) and (self.src.min() < 0 or self.src.max() >= self.n
                              or self.dst.min() < 0 or self.dst.max() >= self.n):
            raise AutodiffError("adjacency endpoint out of range")
        if slots.cols != 1:
            raise ShapeError("weight slots must be a column vector")
        if len(self.slot_index) and (self.slot_index.min() < 0 or self.slot_index.max() >= slots.rows):
            raise AutodiffError("slot index out of range")
        if np.unique(self.src * self.n + self.dst).size != len(self.src):
            raise AutodiffError("duplicate (src, dst) adjacency entry")
        # weights live in [0, 1]; the hair of slack lets central
        # finite-difference probes straddle the endpoints
        if len(slots.data) and (slots.data.min() < -1e-4 or slots.data.max() > 1.0 + 1e-4):
            raise AutodiffError("edge weights must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.src)


def edge_aggregate(h: Tensor, src: np.ndarray, dst: np.ndarray, coeff: Tensor, n_out: int) -> Tensor:
    """out[dst[e]] += coeff[e] * h[src[e]].

    Gradients flow both to the aggregated rows of ``h`` and to the
    per-entry coefficients.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if coeff.shape != (len(src), 1):
        raise ShapeError(f"edge_aggregate: coeff must be ({len(src)}, 1), got {coeff.shape}")
    out = np.zeros((n_out, h.cols))
    np.add.at(out, dst, coeff.data * h.data[src])

    def back_h(g: np.ndarray) -> np.ndarray:
        z = np.zeros(h.shape)
        np.add.at(z, src, coeff.data * g[dst])
        return z

    def back_coeff(g: np.ndarray) -> np.ndarray:
        return (g[dst] * h.data[src]).sum(axis=1, keepdims=True)

    return _make(out, [(h, back_h), (coeff, back_coeff)])


def spmm_agg(adj: SparseWeightedAdj, h: Tensor, norm) -> Tensor:
    """Weighted neighborhood aggregation: out[v] = sum over entries (u, v) of
    norm(u, v) * weight(u, v) * h[u].

    ``norm`` holds one coefficient per adjacency entry, either a plain array
    (constant) or a Tensor when the normalization itself depends on the
    weights. Gradients flow to ``h`` rows and to every weight slot.
    """
    if adj.n != h.rows:
        raise ShapeError(f"spmm_agg: adjacency over {adj.n} nodes, h has {h.rows} rows")
    norm_t = _as_tensor(norm)
    if norm_t.shape != (len(adj), 1):
        raise ShapeError(f"spmm_agg: norm must be ({len(adj)}, 1), got {norm_t.shape}")
    w = gather_rows(adj.slots, adj.slot_index)
    coeff = mul(norm_t, w)
    return edge_aggregate(h, adj.src, adj.dst, coeff, adj.n)
