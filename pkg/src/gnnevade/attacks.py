"""Evasion attacks against frozen trained models.

Single-node attacks perturb the feature row(s) of attacker node(s) inside
the victim's receptive field, under an l0 fraction budget (and an l-inf
bound on continuous features). Edge attacks attach differentiable weight
slots to candidate edges, score every candidate flip from one backward
pass, and toggle the best one. Feature attacks run on the victim's L-hop
local view, which reproduces the full-graph victim logits exactly; edge
attacks run on the full graph because a flip can reroute influence from
anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .graph import Graph, build_view, inject_node, k_hop_neighborhood, toggle_edge
from .models import ForwardInputs, ModelParams, forward

_SEED_ATTACK = 101


class AttackError(Exception):
    pass


class NoAttackerError(AttackError):
    """The variant's candidate set for this victim is empty."""


def victim_rng(seed: int, victim: int) -> np.random.Generator:
    """Independent, reproducible stream for one (seed, victim) attack task."""
    return np.random.default_rng([int(seed), _SEED_ATTACK, int(victim)])


@dataclass(frozen=True)
class Budget:
    """Perturbation limits: l0 fraction, l-inf bound, iterations, step size."""

    eps0: float
    eps_inf: float | None = None
    iterations: int = 20
    gamma: float | None = None        # default 2.5 * eps_inf / iterations
    step_rule: str = "normalized"     # normalized | sign | raw

    def __post_init__(self):
        if not 0.0 <= self.eps0 <= 1.0:
            raise AttackError(f"eps0 must lie in [0, 1], got {self.eps0}")
        if self.eps_inf is not None and self.eps_inf <= 0.0:
            raise AttackError("eps_inf must be positive")
        if self.iterations < 1:
            raise AttackError("iteration budget must be >= 1")
        if self.gamma is not None and self.gamma <= 0.0:
            raise AttackError("gamma must be positive")
        if self.step_rule not in ("normalized", "sign", "raw"):
            raise AttackError(f"unknown step rule {self.step_rule!r}")

    def max_flips(self, d: int) -> int:
        return int(np.floor(self.eps0 * d))

    def step_size(self) -> float:
        if self.gamma is not None:
            return self.gamma
        if self.eps_inf is None:
            raise AttackError("continuous attack needs eps_inf (or an explicit gamma)")
        return 2.5 * self.eps_inf / self.iterations


@dataclass(frozen=True)
class AttackGoal:
    """Reference prediction plus an optional forced target class."""

    reference: int
    target: int | None = None

    def __post_init__(self):
        if self.target is not None and self.target == self.reference:
            raise AttackError("targeted goal must differ from the reference prediction")

    @property
    def targeted(self) -> bool:
        return self.target is not None

    @property
    def loss_label(self) -> int:
        return self.reference if self.target is None else self.target

    @property
    def ascend(self) -> float:
        # non-targeted climbs the reference-label loss; targeted descends the target-label loss
        return 1.0 if self.target is None else -1.0

    def achieved(self, pred: int) -> bool:
        return pred != self.reference if self.target is None else pred == self.target


@dataclass(frozen=True)
class Perturbation:
    """What the attacker changed: feature deltas per attacker and/or edge flips."""

    attackers: tuple[int, ...]
    deltas: np.ndarray                       # (len(attackers), D)
    flipped_edges: tuple[tuple[int, int, str], ...] = ()
    budget: Budget | None = None

    def l0_used(self) -> list[int]:
        return [int(np.count_nonzero(row)) for row in self.deltas]

    def linf_used(self) -> list[float]:
        return [float(np.abs(row).max()) if len(row) else 0.0 for row in self.deltas]


@dataclass(frozen=True)
class AttackOutcome:
    victim: int
    variant: str
    success: bool
    pred_before: int
    pred_after: int
    iterations: int
    perturbation: Perturbation
    unattackable: bool = False

    def to_json_dict(self) -> dict:
        return {
            "victim": self.victim,
            "attackers": list(self.perturbation.attackers),
            "variant": self.variant,
            "success": self.success,
            "pred_before": self.pred_before,
            "pred_after": self.pred_after,
            "iters": self.iterations,
            "l0_used": self.perturbation.l0_used(),
            "linf_used": self.perturbation.linf_used(),
            "flipped_edges": [list(e) for e in self.perturbation.flipped_edges],
            "unattackable": self.unattackable,
        }


def _unattackable(victim: int, variant: str, reference: int, d: int) -> AttackOutcome:
    pert = Perturbation((), np.zeros((0, d)))
    return AttackOutcome(victim, variant, False, reference, reference, 0, pert,
                         unattackable=True)


# ---------------------------------------------------------------------------
# attacker selection


def candidate_attackers(g: Graph, v: int, variant: str, reach: int) -> np.ndarray:
    within = k_hop_neighborhood(g, v, reach)
    if variant == "any":
        return within
    if variant == "hops":
        direct = set(int(x) for x in g.index.neighbors(v))
        return np.array([u for u in within if u not in direct], dtype=np.int64)
    raise AttackError(f"unknown sampling variant {variant!r}")


def choose_attacker_random(g: Graph, v: int, variant: str, reach: int,
                           rng: np.random.Generator) -> int:
    """Uniform attacker choice; `hops` excludes direct neighbors, `direct` is v."""
    if variant == "direct":
        return int(v)
    cands = candidate_attackers(g, v, variant, reach)
    if len(cands) == 0:
        raise NoAttackerError(f"victim {v} has no candidate attacker (variant={variant})")
    return int(rng.choice(cands))


def choose_attackers_random(g: Graph, v: int, count: int, variant: str, reach: int,
                            rng: np.random.Generator) -> tuple[int, ...]:
    """Up to ``count`` distinct attackers, fewer when the pool is smaller."""
    if variant == "direct":
        return (int(v),)
    cands = candidate_attackers(g, v, variant, reach)
    if len(cands) == 0:
        raise NoAttackerError(f"victim {v} has no candidate attacker (variant={variant})")
    take = min(count, len(cands))
    return tuple(sorted(int(x) for x in rng.choice(cands, size=take, replace=False)))


def choose_attacker_topology(g: Graph, v: int) -> int:
    """Minimum-degree direct neighbor; ties resolve to the lowest node id."""
    nbrs = np.sort(g.index.neighbors(v))
    if len(nbrs) == 0:
        raise NoAttackerError(f"victim {v} is isolated")
    degs = g.index.degrees[nbrs]
    return int(nbrs[int(np.argmin(degs))])


def feature_row_gradients(model: ModelParams, g: Graph, v: int, goal: AttackGoal) -> tuple[np.ndarray, np.ndarray]:
    """Loss gradient wrt every feature row in the victim's L-hop view.

    Returns (view node ids, per-row gradients).
    """
    view = build_view(g, v, model.layers)
    fi = ForwardInputs.from_view(view)
    tape = ad.Tape()
    feats = tape.leaf(view.features)
    logits = forward(model, fi, features=feats)
    loss = ad.cross_entropy(ad.take_row(logits, view.center_local), goal.loss_label)
    (gx,) = tape.backward(loss, [feats])
    return view.nodes, gx


def choose_attacker_gradchoice(model: ModelParams, g: Graph, v: int, goal: AttackGoal) -> int:
    """Candidate with the largest l-inf feature-row loss gradient; never v."""
    nodes, gx = feature_row_gradients(model, g, v, goal)
    keep = nodes != v
    nodes, gx = nodes[keep], gx[keep]
    if len(nodes) == 0:
        raise NoAttackerError(f"victim {v} has no candidate attacker in reach")
    norms = np.abs(gx).max(axis=1)
    return int(nodes[int(np.argmax(norms))])  # nodes sorted: ties fall to lowest id


# ---------------------------------------------------------------------------
# feature perturbations


def project_continuous(eta: np.ndarray, budget: Budget) -> np.ndarray:
    """Clamp to the l-inf box, then keep only the largest-magnitude entries
    allowed by the l0 fraction; ties at the cut keep the lowest indices."""
    eta = np.asarray(eta, dtype=np.float64).reshape(-1)
    if budget.eps_inf is None:
        raise AttackError("continuous projection needs eps_inf")
    out = np.clip(eta, -budget.eps_inf, budget.eps_inf)
    keep = budget.max_flips(len(eta))
    if keep >= len(eta):
        return out
    order = np.argsort(-np.abs(out), kind="stable")
    projected = np.zeros_like(out)
    sel = order[:keep]
    projected[sel] = out[sel]
    return projected


def _validate_attackers(g: Graph, v: int, attackers, view) -> list[int]:
    out = []
    for a in attackers:
        a = int(a)
        if not 0 <= a < g.n:
            raise AttackError(f"attacker {a} out of range")
        if a != v and not view.contains(a):
            raise AttackError(f"attacker {a} is outside the victim's reach")
        out.append(a)
    if len(set(out)) != len(out):
        raise AttackError("duplicate attacker ids")
    return sorted(out)


def single_node_attack(model: ModelParams, g: Graph, v: int, attackers: Sequence[int],
                       goal: AttackGoal, budget: Budget, *,
                       clamp_nonneg: bool = False,
                       variant: str = "single-node",
                       reach: int | None = None) -> AttackOutcome:
    """Iterative gradient perturbation of the attacker rows.

    Binary features flip greedily, one bit per gradient recomputation,
    scored by g * (1 - 2x) (predicted first-order loss increase), until the
    per-attacker l0 budget is exhausted or the goal is met. Continuous
    features take up to ``budget.iterations`` projected gradient steps over
    the joint attacker rows.

    ``reach`` widens the local view beyond the model's receptive field so
    distance studies can probe attackers that provably cannot move the
    victim; attackers outside the view are an error.
    """
    v = int(v)
    view = build_view(g, v, max(model.layers, reach or model.layers))
    attackers = _validate_attackers(g, v, attackers, view)
    if not attackers:
        raise AttackError("need at least one attacker")
    rows = np.array([view.local_of(a) for a in attackers], dtype=np.int64)
    fi = ForwardInputs.from_view(view)
    base_rows = view.features[rows].copy()
    cap = budget.max_flips(g.d)

    if cap == 0:
        pert = Perturbation(tuple(attackers), np.zeros((len(attackers), g.d)), budget=budget)
        return AttackOutcome(v, variant, goal.achieved(goal.reference), goal.reference,
                             goal.reference, 0, pert)

    if g.feature_kind == "binary":
        pred_after, iters, x_rows = _discrete_flips(model, fi, view.center_local, rows,
                                                    goal, cap)
        deltas = x_rows - base_rows
    else:
        pred_after, iters, deltas = _continuous_steps(model, fi, view.center_local, rows,
                                                      goal, budget, clamp_nonneg)
    if not np.any(deltas):
        pred_after = goal.reference  # untouched input: the clean prediction stands
    pert = Perturbation(tuple(attackers), deltas, budget=budget)
    return AttackOutcome(v, variant, goal.achieved(pred_after), goal.reference,
                         int(pred_after), iters, pert)


def _discrete_flips(model, fi, center, rows, goal, cap):
    x = fi.features.copy()
    m, d = len(rows), fi.features.shape[1]
    flipped = np.zeros((m, d), dtype=bool)
    flips = np.zeros(m, dtype=np.int64)
    iters = 0
    while True:
        tape = ad.Tape()
        leaf = tape.leaf(x)
        logits = forward(model, fi, features=leaf)
        pred = int(np.argmax(logits.data[center]))
        if goal.achieved(pred) or (flips >= cap).all():
            break
        loss = ad.cross_entropy(ad.take_row(logits, center), goal.loss_label)
        (gx,) = tape.backward(loss, [leaf])
        scores = goal.ascend * gx[rows] * (1.0 - 2.0 * x[rows])
        scores[flipped] = -np.inf
        scores[flips >= cap, :] = -np.inf
        k = int(np.argmax(scores))
        if not np.isfinite(scores.flat[k]):
            break
        a_i, j = divmod(k, d)
        x[rows[a_i], j] = 1.0 - x[rows[a_i], j]
        flipped[a_i, j] = True
        flips[a_i] += 1
        iters += 1
    return pred, iters, x[rows]


def _continuous_steps(model, fi, center, rows, goal, budget, clamp_nonneg):
    base = fi.features
    m, d = len(rows), base.shape[1]
    gamma = budget.step_size()
    eta = np.zeros((m, d))
    pred = goal.reference
    iters = 0
    for _ in range(budget.iterations):
        tape = ad.Tape()
        eta_leaf = tape.leaf(eta)
        feats = ad.add_rows_at(ad.Tensor(base), eta_leaf, rows)
        logits = forward(model, fi, features=feats)
        pred = int(np.argmax(logits.data[center]))
        if goal.achieved(pred):
            return pred, iters, eta
        loss = ad.cross_entropy(ad.take_row(logits, center), goal.loss_label)
        (ge,) = tape.backward(loss, [eta_leaf])
        if budget.step_rule == "normalized":
            peak = np.abs(ge).max()
            if peak == 0.0:
                return pred, iters, eta
            step = gamma * ge / peak
        elif budget.step_rule == "sign":
            step = gamma * np.sign(ge)
        else:
            step = gamma * ge
        eta = eta + goal.ascend * step
        for i in range(m):
            row = project_continuous(eta[i], budget)
            if clamp_nonneg:
                row = np.maximum(row, -base[rows[i]])
            eta[i] = row
        iters += 1
    # budget exhausted: evaluate the final perturbation
    feats = base.copy()
    np.add.at(feats, rows, eta)
    logits = forward(model, fi, features=ad.Tensor(feats))
    return int(np.argmax(logits.data[center])), iters, eta


def zero_features_attack(model: ModelParams, g: Graph, v: int, attacker: int,
                         reference: int | None = None) -> AttackOutcome:
    """Baseline: cancel the attacker's feature vector outright."""
    v, attacker = int(v), int(attacker)
    view = build_view(g, v, model.layers)
    _validate_attackers(g, v, [attacker], view)
    fi = ForwardInputs.from_view(view)
    if reference is None:
        reference = int(np.argmax(forward(model, fi).data[view.center_local]))
    row = view.local_of(attacker)
    delta = -view.features[row].copy()
    if not np.any(delta):
        pert = Perturbation((attacker,), delta[None, :])
        return AttackOutcome(v, "zero-features", False, reference, reference, 0, pert)
    feats = view.features.copy()
    feats[row] = 0.0
    pred = int(np.argmax(forward(model, fi, features=ad.Tensor(feats)).data[view.center_local]))
    pert = Perturbation((attacker,), delta[None, :])
    goal = AttackGoal(reference)
    return AttackOutcome(v, "zero-features", goal.achieved(pred), reference, pred, 1, pert)


def injection_attack(model: ModelParams, g: Graph, v: int, goal: AttackGoal,
                     budget: Budget, *, clamp_nonneg: bool = False) -> AttackOutcome:
    """Attach a fresh zero-featured node to the victim and perturb it."""
    g2 = inject_node(g, v, np.zeros(g.d))
    injected = g2.n - 1
    inner = single_node_attack(model, g2, v, [injected], goal, budget,
                               clamp_nonneg=clamp_nonneg, variant="injection")
    return inner


# ---------------------------------------------------------------------------
# edge attacks


def candidate_edges(g: Graph, v: int, u: int, reach: int) -> tuple[np.ndarray, np.ndarray]:
    """Flippable edges for attacker u: its existing edges plus potential
    edges to every node within reach-1 hops of the victim, and to the victim
    itself. Returns canonical (pairs, current weights), deduplicated."""
    v, u = int(v), int(u)
    if reach < 1:
        raise AttackError("edge candidates need reach >= 1")
    targets = set(int(x) for x in k_hop_neighborhood(g, v, reach - 1))
    targets.add(v)
    cand = {(min(u, w), max(u, w)) for w in targets if w != u}
    cand.update((min(u, int(z)), max(u, int(z))) for z in g.index.neighbors(u))
    pairs = np.array(sorted(cand), dtype=np.int64).reshape(-1, 2)
    return pairs, _edge_tags(g, pairs)


def global_candidate_edges(g: Graph, v: int, reach: int) -> tuple[np.ndarray, np.ndarray]:
    """Every pair (u, w) with w inside the victim's (reach-1)-hop vicinity
    (or w = v); pairs not touching that vicinity provably cannot move the
    victim's logits."""
    v = int(v)
    targets = np.concatenate([k_hop_neighborhood(g, v, reach - 1), [v]])
    us = np.arange(g.n, dtype=np.int64)
    uu = np.repeat(us, len(targets))
    ww = np.tile(targets, g.n)
    keep = uu != ww
    lo = np.minimum(uu[keep], ww[keep])
    hi = np.maximum(uu[keep], ww[keep])
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return pairs, _edge_tags(g, pairs)


def _edge_tags(g: Graph, pairs: np.ndarray) -> np.ndarray:
    if len(pairs) == 0 or len(g.pairs) == 0:
        return np.zeros(len(pairs), dtype=np.int64)
    gkeys = g.pairs[:, 0] * g.n + g.pairs[:, 1]
    keys = pairs[:, 0] * g.n + pairs[:, 1]
    pos = np.clip(np.searchsorted(gkeys, keys), 0, len(gkeys) - 1)
    return (gkeys[pos] == keys).astype(np.int64)


def _first_linear(model: ModelParams, g: Graph, cache: dict | None) -> np.ndarray | None:
    if model.arch not in ("gcn", "sgc"):
        return None
    if cache is None:
        cache = {}
    fl = cache.get("first_linear")
    if fl is None:
        w0 = model.get("w0") if model.arch == "gcn" else model.get("w")
        fl = g.features @ w0
        cache["first_linear"] = fl
    return fl


def edge_flip_scores(model: ModelParams, g: Graph, v: int, pairs: np.ndarray,
                     tags: np.ndarray, goal: AttackGoal,
                     cache: dict | None = None) -> np.ndarray:
    """Score every candidate flip from one backward pass over weight slots.

    score(e) = (1 - 2 w_e) * s_e with s_e the (sign-adjusted) loss gradient;
    inserting an absent edge is profitable when the gradient is positive,
    removing a present one when it is negative.
    """
    cand_keys = pairs[:, 0] * g.n + pairs[:, 1]
    gkeys = g.pairs[:, 0] * g.n + g.pairs[:, 1] if len(g.pairs) else np.zeros(0, np.int64)
    noncand = g.pairs[~np.isin(gkeys, cand_keys)] if len(g.pairs) else g.pairs
    all_pairs = np.vstack([noncand, pairs]) if len(noncand) else pairs
    fi = ForwardInputs(g.n, g.features, all_pairs, np.zeros(g.n))
    tape = ad.Tape()
    slots = tape.leaf(tags.reshape(-1, 1).astype(np.float64))
    weights = ad.vstack(ad.constant(np.ones((len(noncand), 1))), slots) if len(noncand) else slots
    logits = forward(model, fi, pair_weights=weights,
                     first_linear=_first_linear(model, g, cache))
    loss = ad.cross_entropy(ad.take_row(logits, v), goal.loss_label)
    (gw,) = tape.backward(loss, [slots])
    return (1.0 - 2.0 * tags) * (goal.ascend * gw[:, 0])


def multi_edge_attack(model: ModelParams, g: Graph, v: int, budget_edges: int,
                      attacker_mode: str, goal: AttackGoal, reach: int | None = None,
                      rng: np.random.Generator | None = None,
                      cache: dict | None = None) -> AttackOutcome:
    """Greedy edge flips: rescore after each flip, never flip an edge twice."""
    if budget_edges < 1:
        raise AttackError("edge budget must be >= 1")
    if attacker_mode not in ("random-node", "gradchoice-global"):
        raise AttackError(f"unknown attacker mode {attacker_mode!r}")
    v = int(v)
    reach = model.layers if reach is None else int(reach)
    variant = "multi-edge" if budget_edges > 1 else "single-edge"
    if attacker_mode == "random-node":
        if rng is None:
            raise AttackError("random-node edge attack needs an rng")
        attacker = choose_attacker_random(g, v, "any", reach, rng)
        attackers: tuple[int, ...] = (attacker,)
    else:
        attacker = None
        attackers = ()
    if cache is None:
        cache = {}

    g_cur = g
    flipped: list[tuple[int, int, str]] = []
    done = {(int(a), int(b)) for a, b, _ in flipped}
    pred = goal.reference
    for _ in range(budget_edges):
        if attacker is not None:
            pairs, tags = candidate_edges(g_cur, v, attacker, reach)
        else:
            pairs, tags = global_candidate_edges(g_cur, v, reach)
        if len(pairs):
            fresh = np.array([(int(a), int(b)) not in done for a, b in pairs])
            pairs, tags = pairs[fresh], tags[fresh]
        if len(pairs) == 0:
            if not flipped:
                return _unattackable(v, variant, goal.reference, g.d)
            break
        scores = edge_flip_scores(model, g_cur, v, pairs, tags, goal, cache)
        best = int(np.argmax(scores))
        a, b = int(pairs[best, 0]), int(pairs[best, 1])
        flipped.append((a, b, "remove" if tags[best] == 1 else "insert"))
        done.add((a, b))
        g_cur = toggle_edge(g_cur, a, b)
        view = build_view(g_cur, v, reach)
        logits = forward(model, ForwardInputs.from_view(view))
        pred = int(np.argmax(logits.data[view.center_local]))
        if goal.achieved(pred):
            break
    pert = Perturbation(attackers, np.zeros((len(attackers), g.d)),
                        flipped_edges=tuple(flipped))
    return AttackOutcome(v, variant, goal.achieved(pred), goal.reference, pred,
                         len(flipped), pert)


def single_edge_attack(model: ModelParams, g: Graph, v: int, attacker_mode: str,
                       goal: AttackGoal, reach: int | None = None,
                       rng: np.random.Generator | None = None,
                       cache: dict | None = None) -> AttackOutcome:
    """Insert or remove the single best-scoring candidate edge."""
    return multi_edge_attack(model, g, v, 1, attacker_mode, goal, reach, rng, cache)


# ---------------------------------------------------------------------------
# invariant checking


def validate_outcome(outcome: AttackOutcome, g: Graph, *,
                     edge_budget: int = 1) -> list[str]:
    """Check an outcome's perturbation against its own budget record.

    Returns human-readable violations; experiments require an empty list
    for 100% of emitted outcomes.
    """
    problems = []
    pert = outcome.perturbation
    budget = pert.budget
    if pert.deltas.shape[0] != len(pert.attackers):
        problems.append("delta rows do not match attacker count")
        return problems
    for a, delta in zip(pert.attackers, pert.deltas):
        base = g.features[a] if a < g.n else np.zeros(g.d)  # injected node
        if g.feature_kind == "binary":
            perturbed = base + delta
            if not np.isin(np.unique(perturbed), (0.0, 1.0)).all():
                problems.append(f"attacker {a}: perturbed binary row leaves {{0,1}}")
            if not np.isin(np.unique(delta), (-1.0, 0.0, 1.0)).all():
                problems.append(f"attacker {a}: binary delta not a flip vector")
        if budget is not None:
            if np.count_nonzero(delta) > budget.max_flips(g.d):
                problems.append(f"attacker {a}: l0 budget exceeded")
            if g.feature_kind == "continuous" and budget.eps_inf is not None:
                if np.abs(delta).max(initial=0.0) > budget.eps_inf:
                    problems.append(f"attacker {a}: l-inf budget exceeded")
    if len(pert.flipped_edges) > edge_budget:
        problems.append("edge budget exceeded")
    seen = set()
    for a, b, op in pert.flipped_edges:
        if (a, b) in seen:
            problems.append(f"edge ({a}, {b}) flipped twice")
        seen.add((a, b))
        if op not in ("insert", "remove"):
            problems.append(f"unknown edge operation {op!r}")
    return problems
