"""Multi-seed experiment runner: train, attack every test node, aggregate.

A report is a list of cells (one per grid point), each holding per-seed
clean accuracy, attacked accuracy, and success rate, written as canonical
JSON plus a CSV table and one JSONL outcome log per (cell, seed). Reports
are byte-reproducible from the same config, apart from the wall-time
field.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import (
    AttackError, AttackGoal, AttackOutcome, Budget, NoAttackerError, Perturbation,
    choose_attacker_gradchoice, choose_attacker_topology, choose_attackers_random,
    injection_attack, multi_edge_attack, single_node_attack, validate_outcome,
    victim_rng, zero_features_attack,
)
from .graph import Graph, bfs_levels, load_bundle
from .models import TrainConfig, TrainedModel, accuracy, predict, train

ATTACK_VARIANTS = ("none", "single-node", "single-edge", "multi-edge",
                   "zero-features", "injection")
ATTACKER_STRATEGIES = ("random", "gradchoice", "topology", "direct", "hops")

# Per-dataset default budgets, scaled to each benchmark's feature sparsity
# and amplitude. The alternate l-inf preset is the coarser bound some
# continuous-feature experiments use; reports echo whichever is active.
DATASET_BUDGET_PRESETS = {
    "cora": {"eps0": 0.01, "eps_inf": None},
    "citeseer": {"eps0": 0.01, "eps_inf": None},
    "pubmed": {"eps0": 0.05, "eps_inf": 0.04},
}
ALT_EPSINF_PRESET = {"pubmed": 0.1}

_SEED_DISTANCE = 131


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class AttackSpec:
    variant: str = "none"
    attacker: str = "random"
    num_attackers: int = 1
    eps0: float = 0.01
    eps_inf: float | None = None
    iterations: int = 20
    gamma: float | None = None
    step_rule: str = "normalized"
    targeted: int | str | None = None   # None, "random", or a fixed class id
    edge_budget: int = 1
    global_edges: bool = False
    clamp_nonneg: bool = False

    def __post_init__(self):
        if self.variant not in ATTACK_VARIANTS:
            raise ConfigError(f"unknown attack variant {self.variant!r}")
        if self.attacker not in ATTACKER_STRATEGIES:
            raise ConfigError(f"unknown attacker strategy {self.attacker!r}")
        if self.num_attackers < 1:
            raise ConfigError("num_attackers must be >= 1")
        if self.num_attackers > 1 and self.attacker not in ("random", "hops"):
            raise ConfigError("multiple attackers are sampled; use a random strategy")
        if self.edge_budget < 1:
            raise ConfigError("edge_budget must be >= 1")
        if isinstance(self.targeted, str) and self.targeted != "random":
            raise ConfigError("targeted must be a class id, 'random', or omitted")

    def budget(self) -> Budget:
        return Budget(eps0=self.eps0, eps_inf=self.eps_inf, iterations=self.iterations,
                      gamma=self.gamma, step_rule=self.step_rule)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    arch: str = "gcn"
    attack: AttackSpec = field(default_factory=AttackSpec)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    hidden: int = 16
    layers: int = 2
    dropout: float = 0.5
    lr: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 200
    patience: int = 20
    gin_mlp_hidden: int = 64

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ConfigError("need at least one seed")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay,
                           max_epochs=self.max_epochs, patience=self.patience,
                           dropout=self.dropout, hidden=self.hidden,
                           layers=self.layers, gin_mlp_hidden=self.gin_mlp_hidden,
                           seed=seed)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CellResult:
    cell: dict
    clean: list[float]
    attacked: list[float]
    success: list[float]
    unattackable: int
    invariant_violations: int
    outcomes: dict[int, list[AttackOutcome]]  # per seed


@dataclass
class ExperimentReport:
    config: dict
    cells: list[CellResult]
    wall_time_s: float


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation (ddof = 0) across seeds."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def train_models(config: ExperimentConfig, g: Graph) -> dict[int, TrainedModel]:
    return {seed: train(g, config.arch, config.train_config(seed)) for seed in config.seeds}


def _pick_goal(spec: AttackSpec, g: Graph, ref: int, rng) -> AttackGoal | None:
    """None means the goal is unsatisfiable for this victim (fixed target == ref)."""
    if spec.targeted is None:
        return AttackGoal(ref)
    if spec.targeted == "random":
        choices = [c for c in range(g.y_count) if c != ref]
        if not choices:
            return None
        return AttackGoal(ref, int(rng.choice(choices)))
    target = int(spec.targeted)
    if target == ref:
        return None
    return AttackGoal(ref, target)


def _untouched(v: int, variant: str, ref: int, d: int, unattackable: bool) -> AttackOutcome:
    return AttackOutcome(v, variant, False, ref, ref, 0, Perturbation((), np.zeros((0, d))),
                         unattackable=unattackable)


def attack_victim(model, g: Graph, v: int, spec: AttackSpec, seed: int,
                  clean_pred: np.ndarray, cache: dict) -> AttackOutcome:
    """One victim, one frozen model; all randomness from the victim's stream."""
    rng = victim_rng(seed, v)
    ref = int(clean_pred[v])
    if spec.variant == "none":
        return _untouched(v, "none", ref, g.d, unattackable=False)
    goal = _pick_goal(spec, g, ref, rng)
    if goal is None:
        return _untouched(v, spec.variant, ref, g.d, unattackable=True)
    reach = model.layers
    try:
        if spec.variant in ("single-edge", "multi-edge"):
            mode = "gradchoice-global" if spec.global_edges else "random-node"
            return multi_edge_attack(model, g, v, spec.edge_budget, mode, goal,
                                     rng=rng, cache=cache)
        if spec.variant == "injection":
            return injection_attack(model, g, v, goal, spec.budget(),
                                    clamp_nonneg=spec.clamp_nonneg)
        if spec.variant == "zero-features":
            attackers = _select_attackers(model, g, v, spec, goal, reach, rng)
            return zero_features_attack(model, g, v, attackers[0], reference=ref)
        attackers = _select_attackers(model, g, v, spec, goal, reach, rng)
        return single_node_attack(model, g, v, attackers, goal, spec.budget(),
                                  clamp_nonneg=spec.clamp_nonneg)
    except NoAttackerError:
        return _untouched(v, spec.variant, ref, g.d, unattackable=True)


def _select_attackers(model, g, v, spec, goal, reach, rng) -> tuple[int, ...]:
    if spec.attacker == "direct":
        return (int(v),)
    if spec.attacker == "topology":
        return (choose_attacker_topology(g, v),)
    if spec.attacker == "gradchoice":
        return (choose_attacker_gradchoice(model, g, v, goal),)
    variant = "hops" if spec.attacker == "hops" else "any"
    return choose_attackers_random(g, v, spec.num_attackers, variant, reach, rng)


def run_cell(config: ExperimentConfig, g: Graph, spec: AttackSpec,
             trained: dict[int, TrainedModel], cell: dict) -> CellResult:
    clean, attacked, success = [], [], []
    unattackable = 0
    violations = 0
    outcomes: dict[int, list[AttackOutcome]] = {}
    victims = np.sort(g.test_mask)
    for seed in config.seeds:
        model = trained[seed].params
        clean_pred = predict(model, g)
        clean.append(accuracy(clean_pred, g, g.test_mask))
        cache: dict = {}
        outs = [attack_victim(model, g, int(v), spec, seed, clean_pred, cache)
                for v in victims]
        outcomes[seed] = outs
        for out in outs:
            violations += len(validate_outcome(out, g, edge_budget=spec.edge_budget))
            unattackable += int(out.unattackable)
        preds_after = np.array([o.pred_after for o in outs])
        attacked.append(float(np.mean(preds_after == g.labels[victims])))
        success.append(float(np.mean([o.success for o in outs])))
    return CellResult(cell, clean, attacked, success, unattackable, violations, outcomes)


def run_experiment(config: ExperimentConfig, graph: Graph | None = None,
                   trained: dict[int, TrainedModel] | None = None) -> ExperimentReport:
    start = time.perf_counter()
    g = load_bundle(config.dataset) if graph is None else graph
    trained = trained or train_models(config, g)
    cell = run_cell(config, g, config.attack, trained, {"attack": config.attack.variant})
    return ExperimentReport(config.echo(), [cell], time.perf_counter() - start)


def sweep_eps(config: ExperimentConfig, eps0_grid=None, epsinf_grid=None,
              graph: Graph | None = None,
              trained: dict[int, TrainedModel] | None = None) -> ExperimentReport:
    """One cell per grid point; trained models are shared across points."""
    start = time.perf_counter()
    if not eps0_grid and not epsinf_grid:
        raise ConfigError("sweep needs a non-empty eps0 and/or eps_inf grid")
    g = load_bundle(config.dataset) if graph is None else graph
    trained = trained or train_models(config, g)
    eps0s = list(eps0_grid) if eps0_grid else [config.attack.eps0]
    epsinfs = list(epsinf_grid) if epsinf_grid else [config.attack.eps_inf]
    cells = []
    for e_inf in epsinfs:
        for e0 in eps0s:
            spec = replace(config.attack, eps0=float(e0),
                           eps_inf=None if e_inf is None else float(e_inf))
            cell = {"eps0": float(e0)}
            if e_inf is not None:
                cell["eps_inf"] = float(e_inf)
            cells.append(run_cell(config, g, spec, trained, cell))
    return ExperimentReport(config.echo(), cells, time.perf_counter() - start)


def attacker_count_study(config: ExperimentConfig, counts=(1, 2, 3, 4, 5),
                         graph: Graph | None = None,
                         trained: dict[int, TrainedModel] | None = None) -> ExperimentReport:
    start = time.perf_counter()
    if min(counts) < 1:
        raise ConfigError("attacker counts must be >= 1")
    g = load_bundle(config.dataset) if graph is None else graph
    trained = trained or train_models(config, g)
    cells = []
    for count in counts:
        spec = replace(config.attack, variant="single-node", num_attackers=int(count))
        cells.append(run_cell(config, g, spec, trained, {"num_attackers": int(count)}))
    return ExperimentReport(config.echo(), cells, time.perf_counter() - start)


def distance_study(config: ExperimentConfig, max_distance: int = 8,
                   graph: Graph | None = None,
                   trained: dict[int, TrainedModel] | None = None) -> ExperimentReport:
    """Attack with one attacker at exactly distance d, for d = 1..max_distance.

    Victims with no node at that distance stay unattacked in that cell, so
    accuracy denominators remain comparable across distances. The model
    should be trained with layers >= max_distance so every attacker is
    inside the receptive field.
    """
    start = time.perf_counter()
    g = load_bundle(config.dataset) if graph is None else graph
    trained = trained or train_models(config, g)
    victims = np.sort(g.test_mask)
    cells = []
    for d in range(1, max_distance + 1):
        clean, attacked, success = [], [], []
        unattackable = 0
        violations = 0
        outcomes: dict[int, list[AttackOutcome]] = {}
        for seed in config.seeds:
            model = trained[seed].params
            clean_pred = predict(model, g)
            clean.append(accuracy(clean_pred, g, g.test_mask))
            outs = []
            for v in map(int, victims):
                ref = int(clean_pred[v])
                levels = bfs_levels(g, v, max_depth=d)
                ring = np.array(sorted(u for u, dist in levels.items() if dist == d),
                                dtype=np.int64)
                if len(ring) == 0:
                    outs.append(_untouched(v, "single-node", ref, g.d, unattackable=True))
                    continue
                rng = np.random.default_rng([seed, _SEED_DISTANCE, v, d])
                attacker = int(rng.choice(ring))
                goal = _pick_goal(config.attack, g, ref, rng)
                if goal is None:
                    outs.append(_untouched(v, "single-node", ref, g.d, unattackable=True))
                    continue
                outs.append(single_node_attack(model, g, v, [attacker], goal,
                                               config.attack.budget(),
                                               clamp_nonneg=config.attack.clamp_nonneg,
                                               reach=d))
            outcomes[seed] = outs
            for out in outs:
                violations += len(validate_outcome(out, g))
                unattackable += int(out.unattackable)
            preds_after = np.array([o.pred_after for o in outs])
            attacked.append(float(np.mean(preds_after == g.labels[victims])))
            success.append(float(np.mean([o.success for o in outs])))
        cells.append(CellResult({"distance": d}, clean, attacked, success,
                                unattackable, violations, outcomes))
    return ExperimentReport(config.echo(), cells, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# report serialization


def _metric_block(values) -> dict:
    m, s = mean_std(values)
    return {"per_seed": [float(v) for v in values], "mean": m, "std": s}


def report_dict(report: ExperimentReport, log_paths: dict | None = None) -> dict:
    cells = []
    for ci, cell in enumerate(report.cells):
        entry = {
            "cell": cell.cell,
            "clean_accuracy": _metric_block(cell.clean),
            "attacked_accuracy": _metric_block(cell.attacked),
            "success_rate": _metric_block(cell.success),
            "unattackable": cell.unattackable,
            "invariant_violations": cell.invariant_violations,
            "n_victims": len(next(iter(cell.outcomes.values()))) if cell.outcomes else 0,
        }
        if log_paths:
            entry["outcome_logs"] = {str(seed): log_paths[(ci, seed)]
                                     for seed in sorted(cell.outcomes)}
        cells.append(entry)
    return {
        "schema": 1,
        "config": report.config,
        "cells": cells,
        "wall_time_s": report.wall_time_s,
    }


def write_report(report: ExperimentReport, out_dir) -> Path:
    """report.json + report.csv + one JSONL outcome log per (cell, seed)."""
    out = Path(out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    log_paths = {}
    for ci, cell in enumerate(report.cells):
        for seed, outs in sorted(cell.outcomes.items()):
            rel = f"logs/cell{ci}_seed{seed}.jsonl"
            with open(out / rel, "w", encoding="utf-8") as f:
                for o in outs:
                    f.write(json.dumps(o.to_json_dict(), sort_keys=True) + "\n")
            log_paths[(ci, seed)] = rel
    doc = report_dict(report, log_paths)
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_csv(doc, out / "report.csv")
    return out / "report.json"


def _write_csv(doc: dict, path) -> None:
    cell_keys = sorted({k for entry in doc["cells"] for k in entry["cell"]})
    fields = cell_keys + ["clean_mean", "clean_std", "attacked_mean", "attacked_std",
                          "success_mean", "success_std", "unattackable",
                          "invariant_violations", "n_victims"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for entry in doc["cells"]:
            row = {k: entry["cell"].get(k, "") for k in cell_keys}
            row.update({
                "clean_mean": entry["clean_accuracy"]["mean"],
                "clean_std": entry["clean_accuracy"]["std"],
                "attacked_mean": entry["attacked_accuracy"]["mean"],
                "attacked_std": entry["attacked_accuracy"]["std"],
                "success_mean": entry["success_rate"]["mean"],
                "success_std": entry["success_rate"]["std"],
                "unattackable": entry["unattackable"],
                "invariant_violations": entry["invariant_violations"],
                "n_victims": entry["n_victims"],
            })
            w.writerow(row)


def replay_attacked_accuracy(log_path, g: Graph) -> float:
    """Recompute a cell's attacked accuracy from its outcome log alone."""
    preds = {}
    with open(log_path, "r", encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            preds[rec["victim"]] = rec["pred_after"]
    victims = np.sort(g.test_mask)
    return float(np.mean([preds[int(v)] == g.labels[v] for v in victims]))
