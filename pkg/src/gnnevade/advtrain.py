"""Adversarial training against the single-node feature attack.

Each epoch, every labeled training node gets an attacker (sampled fresh, or
the minimum-degree neighbor), the inner attack runs against the current
frozen parameters, and one optimizer step is taken on the combined loss

    (1 / 2N) * sum_i [ J(clean, v_i) + J(perturbed_i, v_i) ]

Training nodes whose perturbation comes back empty (no attacker in reach,
or a zero inner budget) contribute their clean term twice, which makes the
zero-budget configuration reduce to plain supervised training exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attacks import AttackGoal, Budget, NoAttackerError, choose_attacker_random, \
    choose_attacker_topology, single_node_attack
from .graph import Graph, build_view
from .models import ForwardInputs, TrainConfig, TrainedModel, fit, forward, predict

_SEED_ADV_SAMPLING = 41


@dataclass(frozen=True)
class AdvTrainConfig:
    base: TrainConfig
    strategy: str = "random"          # random | topology
    inner_eps0: float = 0.01
    inner_eps_inf: float | None = None
    inner_iterations: int = 5         # 0 disables the inner attack entirely
    inner_gamma: float | None = None

    def __post_init__(self):
        if self.strategy not in ("random", "topology"):
            raise ValueError(f"unknown attacker strategy {self.strategy!r}")
        if self.inner_iterations < 0:
            raise ValueError("inner iteration count cannot be negative")

    def inner_budget(self) -> Budget | None:
        if self.inner_iterations == 0 or self.inner_eps0 == 0.0:
            return None
        return Budget(eps0=self.inner_eps0, eps_inf=self.inner_eps_inf,
                      iterations=self.inner_iterations, gamma=self.inner_gamma)


def adversarial_train(graph: Graph, arch: str, config: AdvTrainConfig) -> TrainedModel:
    cfg = config.base
    budget = config.inner_budget()
    train_rows = graph.train_mask
    train_labels = graph.labels[train_rows]
    n_train = len(train_rows)
    views = {}  # per-node local views are position-stable across epochs

    def view_of(v: int):
        if v not in views:
            views[v] = build_view(graph, v, cfg.layers)
        return views[v]

    def epoch_loss(epoch, tape, leaves, logits, params_now, drop_rng):
        clean_sum = ad.cross_entropy_sum(logits, train_rows, train_labels)
        rng = np.random.default_rng([cfg.seed, _SEED_ADV_SAMPLING, epoch])
        refs = predict(params_now, graph) if budget is not None else None
        adv_terms = []
        doubled_rows, doubled_labels = [], []
        for v, y in zip(train_rows, train_labels):
            v, y = int(v), int(y)
            deltas = None
            attackers: tuple[int, ...] = ()
            if budget is not None:
                try:
                    if config.strategy == "random":
                        attacker = choose_attacker_random(graph, v, "any", cfg.layers, rng)
                    else:
                        attacker = choose_attacker_topology(graph, v)
                    out = single_node_attack(params_now, graph, v, [attacker],
                                             AttackGoal(int(refs[v])), budget)
                    if np.any(out.perturbation.deltas):
                        deltas = out.perturbation.deltas
                        attackers = out.perturbation.attackers
                except NoAttackerError:
                    pass
            if deltas is None:
                doubled_rows.append(v)
                doubled_labels.append(y)
                continue
            view = view_of(v)
            feats = view.features.copy()
            for a, delta in zip(attackers, deltas):
                feats[view.local_of(a)] += delta
            local_logits = forward(params_now, ForwardInputs.from_view(view),
                                   param_tensors=leaves, features=ad.Tensor(feats),
                                   training=True, dropout_rng=drop_rng)
            adv_terms.append(ad.cross_entropy(
                ad.take_row(local_logits, view.center_local), y))
        adv_sum = None
        if doubled_rows:
            adv_sum = ad.cross_entropy_sum(logits, np.array(doubled_rows),
                                           np.array(doubled_labels))
        for term in adv_terms:
            adv_sum = term if adv_sum is None else ad.add(adv_sum, term)
        return ad.scale(ad.add(clean_sum, adv_sum), 1.0 / (2.0 * n_train))

    return fit(graph, arch, cfg, epoch_loss=epoch_loss)
