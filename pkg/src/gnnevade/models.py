"""GNN architectures (GCN, SGC, GIN, GraphSAGE-mean) and supervised training.

Every forward pass is assembled from the autodiff primitives, so logits are
differentiable with respect to parameters, node features, and per-edge
weights at once. Attacks reuse the same builders with frozen parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .graph import Graph, GraphError, LocalView

ARCHITECTURES = ("gcn", "sgc", "gin", "sage")

# rng stream tags so training, dropout, and attack streams never collide
_SEED_INIT = 17
_SEED_DROPOUT = 29


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 200
    patience: int = 20
    dropout: float = 0.5
    hidden: int = 16
    layers: int = 2
    gin_mlp_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.patience > self.max_epochs:
            raise TrainingError("patience cannot exceed max_epochs")
        if self.layers < 1:
            raise TrainingError("need at least one layer")


@dataclass
class ModelParams:
    """Trainable weights plus the metadata needed to rebuild the forward."""

    arch: str
    layers: int
    in_dim: int
    out_dim: int
    hidden: int
    gin_mlp_hidden: int
    dropout: float
    seed: int
    names: tuple[str, ...]
    arrays: list[np.ndarray]
    decay_group: tuple[int, ...]  # first-layer parameters, subject to weight decay

    def get(self, name: str) -> np.ndarray:
        return self.arrays[self.names.index(name)]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.layers, self.in_dim, self.out_dim,
                           self.hidden, self.gin_mlp_hidden, self.dropout, self.seed,
                           self.names, [a.copy() for a in self.arrays], self.decay_group)

    def freeze(self) -> "ModelParams":
        for a in self.arrays:
            a.setflags(write=False)
        return self


@dataclass(frozen=True)
class TrainedModel:
    params: ModelParams
    val_accuracy: float
    best_epoch: int
    loss_history: tuple[float, ...]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_params(arch: str, in_dim: int, out_dim: int, cfg: TrainConfig) -> ModelParams:
    if arch not in ARCHITECTURES:
        raise TrainingError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng([cfg.seed, _SEED_INIT])
    names: list[str] = []
    arrays: list[np.ndarray] = []

    def param(name, arr):
        names.append(name)
        arrays.append(np.ascontiguousarray(arr, dtype=np.float64))

    L = cfg.layers
    if arch == "gcn":
        dims = [in_dim] + [cfg.hidden] * (L - 1) + [out_dim]
        for l in range(L):
            param(f"w{l}", _glorot(rng, dims[l], dims[l + 1]))
            param(f"b{l}", np.zeros((1, dims[l + 1])))
        decay = (0, 1)
    elif arch == "sgc":
        param("w", _glorot(rng, in_dim, out_dim))
        param("b", np.zeros((1, out_dim)))
        decay = (0, 1)
    elif arch == "gin":
        dims = [in_dim] + [cfg.hidden] * (L - 1) + [out_dim]
        for l in range(L):
            param(f"eps{l}", np.zeros((1, 1)))
            param(f"w{l}a", _glorot(rng, dims[l], cfg.gin_mlp_hidden))
            param(f"b{l}a", np.zeros((1, cfg.gin_mlp_hidden)))
            param(f"w{l}b", _glorot(rng, cfg.gin_mlp_hidden, dims[l + 1]))
            param(f"b{l}b", np.zeros((1, dims[l + 1])))
        decay = (0, 1, 2, 3, 4)
    else:  # sage
        dims = [in_dim] + [cfg.hidden] * (L - 1) + [out_dim]
        for l in range(L):
            param(f"wself{l}", _glorot(rng, dims[l], dims[l + 1]))
            param(f"wnbr{l}", _glorot(rng, dims[l], dims[l + 1]))
            param(f"b{l}", np.zeros((1, dims[l + 1])))
        decay = (0, 1, 2)
    return ModelParams(arch, L, in_dim, out_dim, cfg.hidden, cfg.gin_mlp_hidden,
                       cfg.dropout, cfg.seed, tuple(names), arrays, decay)


# ---------------------------------------------------------------------------
# forward passes


@dataclass(frozen=True)
class ForwardInputs:
    """The structural slice of a graph a forward pass needs."""

    n: int
    features: np.ndarray
    pairs: np.ndarray
    outside_degree: np.ndarray  # weight-1 neighbors not represented in `pairs`

    @classmethod
    def from_graph(cls, g: Graph) -> "ForwardInputs":
        return cls(g.n, g.features, g.pairs, np.zeros(g.n))

    @classmethod
    def from_view(cls, view: LocalView) -> "ForwardInputs":
        return cls(len(view.nodes), view.features, view.pairs, view.outside_degree)


def _directed(pairs: np.ndarray, n: int, self_loops: bool):
    p = len(pairs)
    if p:
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    else:
        src = np.zeros(0, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
    slot = np.concatenate([np.arange(p), np.arange(p)])
    if self_loops:
        loop = np.arange(n, dtype=np.int64)
        src = np.concatenate([src, loop])
        dst = np.concatenate([dst, loop])
        slot = np.concatenate([slot, p + loop])
    return src, dst, slot.astype(np.int64)


def _pair_slot_tensor(fi: ForwardInputs, pair_weights) -> ad.Tensor:
    """One weight slot per stored undirected edge, shared by both directions."""
    p = len(fi.pairs)
    if pair_weights is None:
        return ad.constant(np.ones((p, 1)))
    if isinstance(pair_weights, ad.Tensor):
        if pair_weights.shape != (p, 1):
            raise TrainingError(f"pair weights must be ({p}, 1), got {pair_weights.shape}")
        return pair_weights
    return ad.constant(np.asarray(pair_weights, dtype=np.float64).reshape(p, 1))


def _gcn_context(fi: ForwardInputs, pair_weights):
    """Self-loop-augmented adjacency with symmetric normalization.

    d~(x) = 1 + sum of incident edge weights (+ boundary neighbors held at
    weight 1); entry (u -> v) is normalized by 1/sqrt(d~(u) d~(v)).
    Differentiable through both the weight factor and the degrees whenever
    the weights are a leaf.
    """
    n = fi.n
    src, dst, slot = _directed(fi.pairs, n, self_loops=True)
    w_pairs = _pair_slot_tensor(fi, pair_weights)
    slots = ad.vstack(w_pairs, ad.constant(np.ones((n, 1))))
    adj = ad.SparseWeightedAdj(n, src, dst, slots, slot)
    outside = fi.outside_degree.reshape(n, 1)
    if slots.requires_grad:
        w_entries = ad.gather_rows(slots, slot)
        dtilde = ad.add(ad.scatter_sum(w_entries, dst, n), ad.constant(outside))
        inv = ad.rsqrt(dtilde)
        norm = ad.mul(ad.gather_rows(inv, src), ad.gather_rows(inv, dst))
    else:
        w_entries = slots.data[slot]
        dtilde = outside.copy()
        np.add.at(dtilde, dst, w_entries)
        inv = 1.0 / np.sqrt(dtilde)
        norm = ad.constant(inv[src] * inv[dst])
    return adj, norm


def _plain_context(fi: ForwardInputs, pair_weights):
    """Unnormalized weighted entries, no self-loops (GIN / SAGE aggregation)."""
    n = fi.n
    src, dst, slot = _directed(fi.pairs, n, self_loops=False)
    slots = _pair_slot_tensor(fi, pair_weights)
    adj = ad.SparseWeightedAdj(n, src, dst, slots, slot)
    return adj, ad.constant(np.ones((len(src), 1)))


def _dropout(h: ad.Tensor, p: float, rng: np.random.Generator) -> ad.Tensor:
    mask = (rng.random(h.shape) >= p) / (1.0 - p)
    return ad.mul(h, ad.constant(mask))


def forward(params: ModelParams, fi: ForwardInputs, *,
            param_tensors: Sequence[ad.Tensor] | None = None,
            features: ad.Tensor | None = None,
            pair_weights=None,
            first_linear: np.ndarray | None = None,
            training: bool = False,
            dropout_rng: np.random.Generator | None = None) -> ad.Tensor:
    """Logits for every node of ``fi``.

    ``features`` and ``pair_weights`` may be leaf tensors to obtain
    gradients with respect to them; ``first_linear`` short-circuits the
    (feature x first-weight) product for frozen-parameter edge attacks,
    where features never change.
    """
    if fi.features.shape[1] != params.in_dim and features is None and first_linear is None:
        raise TrainingError(f"feature dim {fi.features.shape[1]} does not match model input {params.in_dim}")
    if features is not None and features.shape != fi.features.shape:
        raise TrainingError(f"features override shape {features.shape} != {fi.features.shape}")
    if first_linear is not None and (features is not None or param_tensors is not None):
        raise TrainingError("first_linear requires frozen parameters and base features")

    def P(name: str) -> ad.Tensor:
        i = params.names.index(name)
        if param_tensors is not None:
            return param_tensors[i]
        return ad.Tensor(params.arrays[i])

    h = features if features is not None else ad.Tensor(fi.features)
    drop = training and params.dropout > 0.0
    if drop and dropout_rng is None:
        raise TrainingError("training-mode forward needs a dropout rng")
    L = params.layers

    if params.arch == "gcn":
        adj, norm = _gcn_context(fi, pair_weights)
        for l in range(L):
            h = ad.constant(first_linear) if l == 0 and first_linear is not None \
                else ad.matmul(h, P(f"w{l}"))
            h = ad.spmm_agg(adj, h, norm)
            h = ad.add_row(h, P(f"b{l}"))
            if l < L - 1:
                h = ad.relu(h)
                if drop:
                    h = _dropout(h, params.dropout, dropout_rng)
        return h

    if params.arch == "sgc":
        adj, norm = _gcn_context(fi, pair_weights)
        h = ad.constant(first_linear) if first_linear is not None else ad.matmul(h, P("w"))
        for _ in range(L):
            h = ad.spmm_agg(adj, h, norm)
        return ad.add_row(h, P("b"))

    if params.arch == "gin":
        adj, norm = _plain_context(fi, pair_weights)
        for l in range(L):
            nsum = ad.spmm_agg(adj, h, norm)
            combined = ad.add(ad.scale_t(h, ad.add_const(P(f"eps{l}"), 1.0)), nsum)
            h = ad.relu(ad.add_row(ad.matmul(combined, P(f"w{l}a")), P(f"b{l}a")))
            h = ad.add_row(ad.matmul(h, P(f"w{l}b")), P(f"b{l}b"))
            if l < L - 1 and drop:
                h = _dropout(h, params.dropout, dropout_rng)
        return h

    # sage: degree-weighted neighbor mean; isolated nodes get a zero term
    adj, norm = _plain_context(fi, pair_weights)
    w_entries = ad.gather_rows(adj.slots, adj.slot_index)
    den = ad.add(ad.scatter_sum(w_entries, adj.dst, fi.n) if len(adj) else
                 ad.constant(np.zeros((fi.n, 1))),
                 ad.constant(fi.outside_degree.reshape(fi.n, 1)))
    inv = ad.recip_or_zero(den)
    for l in range(L):
        nsum = ad.spmm_agg(adj, h, norm)
        mean = ad.row_scale(nsum, inv)
        h = ad.add_row(ad.add(ad.matmul(h, P(f"wself{l}")), ad.matmul(mean, P(f"wnbr{l}"))),
                       P(f"b{l}"))
        if l < L - 1:
            h = ad.relu(h)
            if drop:
                h = _dropout(h, params.dropout, dropout_rng)
    return h


def logits_of(params: ModelParams, fi: ForwardInputs, **kw) -> np.ndarray:
    return forward(params, fi, **kw).data


def predict(params: ModelParams, target, *, features=None, pair_weights=None,
            first_linear=None) -> np.ndarray:
    """Per-node argmax class ids; ties resolve to the lowest class index."""
    fi = target if isinstance(target, ForwardInputs) else ForwardInputs.from_graph(target)
    feats = ad.Tensor(np.asarray(features, dtype=np.float64)) if features is not None else None
    logits = logits_of(params, fi, features=feats, pair_weights=pair_weights,
                       first_linear=first_linear)
    return np.argmax(logits, axis=1)


def accuracy(predictions: np.ndarray, g: Graph, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=np.int64)
    if len(mask) == 0:
        raise ValueError("accuracy over an empty mask is undefined")
    return float(np.mean(predictions[mask] == g.labels[mask]))


# ---------------------------------------------------------------------------
# training


class _Adam:
    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(a - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


# signature: (epoch, tape, leaves, train_logits, params_now, dropout_rng) -> loss tensor
EpochLoss = Callable[[int, ad.Tape, list, ad.Tensor, ModelParams, np.random.Generator], ad.Tensor]


def fit(graph: Graph, arch: str, cfg: TrainConfig,
        epoch_loss: EpochLoss | None = None) -> TrainedModel:
    """Adam training with early stopping on validation accuracy.

    Returns the parameter snapshot from the best-validation epoch. A custom
    ``epoch_loss`` may replace the plain supervised objective (used by
    adversarial training); parameters are only ever updated by the
    optimizer.
    """
    if len(graph.train_mask) == 0:
        raise TrainingError("training requires a non-empty train mask")
    if len(graph.val_mask) == 0:
        raise TrainingError("early stopping requires a non-empty val mask")
    params = init_params(arch, graph.d, graph.y_count, cfg)
    fi = ForwardInputs.from_graph(graph)
    train_rows = graph.train_mask
    train_labels = graph.labels[train_rows]
    adam = _Adam(params.arrays, cfg.lr)
    best_acc = -1.0
    best_epoch = -1
    best_arrays = [a.copy() for a in params.arrays]
    history: list[float] = []
    for epoch in range(cfg.max_epochs):
        tape = ad.Tape()
        leaves = [tape.leaf(a) for a in params.arrays]
        drop_rng = np.random.default_rng([cfg.seed, _SEED_DROPOUT, epoch])
        logits = forward(params, fi, param_tensors=leaves, training=True, dropout_rng=drop_rng)
        if epoch_loss is None:
            loss = ad.cross_entropy_mean(logits, train_rows, train_labels)
        else:
            loss = epoch_loss(epoch, tape, leaves, logits, params, drop_rng)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        history.append(loss_val)
        grads = tape.backward(loss, leaves)
        for i in params.decay_group:
            grads[i] = grads[i] + cfg.weight_decay * params.arrays[i]
        params.arrays = adam.step(params.arrays, grads)
        preds = predict(params, fi)
        val_acc = accuracy(preds, graph, graph.val_mask)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_arrays = [a.copy() for a in params.arrays]
        elif epoch - best_epoch >= cfg.patience:
            break
    params.arrays = best_arrays
    params.freeze()
    return TrainedModel(params, best_acc, best_epoch, tuple(history))


def train(graph: Graph, arch: str, cfg: TrainConfig) -> TrainedModel:
    return fit(graph, arch, cfg)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """JSON header line + flat little-endian float64 parameter block."""
    import json

    header = {
        "format": "gnnevade-checkpoint",
        "version": 1,
        "architecture": params.arch,
        "layers": params.layers,
        "in_dim": params.in_dim,
        "out_dim": params.out_dim,
        "hidden": params.hidden,
        "gin_mlp_hidden": params.gin_mlp_hidden,
        "dropout": params.dropout,
        "seed": params.seed,
        "decay_group": list(params.decay_group),
        "manifest": [[n, list(a.shape)] for n, a in zip(params.names, params.arrays)],
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for a in params.arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    import json

    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != "gnnevade-checkpoint" or header.get("version") != 1:
            raise TrainingError(f"not a recognized checkpoint: {path}")
        names, arrays = [], []
        for name, shape in header["manifest"]:
            count = int(np.prod(shape))
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise TrainingError("checkpoint truncated")
            names.append(name)
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64))
    params = ModelParams(header["architecture"], header["layers"], header["in_dim"],
                         header["out_dim"], header["hidden"], header["gin_mlp_hidden"],
                         header["dropout"], header["seed"], tuple(names), arrays,
                         tuple(header["decay_group"]))
    return params.freeze(), header.get("extra", {})
