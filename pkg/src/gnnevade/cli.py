"""Command-line front end.

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .advtrain import AdvTrainConfig, adversarial_train
from .attacks import AttackError
from .graph import GraphError, load_bundle
from .harness import (
    AttackSpec, ConfigError, ExperimentConfig, attacker_count_study, distance_study,
    load_bundle as _load, mean_std, run_experiment, sweep_eps, write_report,
)
from .models import TrainingError, accuracy, predict, save_checkpoint, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); config errors are exit 1
        raise ConfigError(message)


def _parse_seeds(raw: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in raw.split(",") if s.strip() != "")
    except ValueError:
        raise ConfigError(f"bad seed list {raw!r}")
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def _parse_grid(raw: str) -> list[float]:
    try:
        return [float(x) for x in raw.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad grid {raw!r}")


def _add_shared(p: argparse.ArgumentParser):
    p.add_argument("--dataset", required=True, help="graph bundle path")
    p.add_argument("--model", default="gcn", choices=["gcn", "sgc", "gin", "sage"])
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20)


def _add_attack(p: argparse.ArgumentParser):
    p.add_argument("--attack", default="single-node",
                   choices=["none", "single-node", "single-edge", "multi-edge",
                            "zero-features", "injection"])
    p.add_argument("--attacker", default="random",
                   choices=["random", "gradchoice", "topology", "direct", "hops"])
    p.add_argument("--num-attackers", type=int, default=1)
    p.add_argument("--eps0", type=float, default=0.01)
    p.add_argument("--epsinf", type=float, default=None)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--targeted", default=None,
                   help="a class id or 'random'; omit for non-targeted")
    p.add_argument("--edge-budget", type=int, default=1)
    p.add_argument("--global-edges", action="store_true")
    p.add_argument("--clamp-nonneg", action="store_true")


def _spec_from(args) -> AttackSpec:
    targeted = args.targeted
    if targeted is not None and targeted != "random":
        try:
            targeted = int(targeted)
        except ValueError:
            raise ConfigError("--targeted takes a class id or 'random'")
    return AttackSpec(variant=args.attack, attacker=args.attacker,
                      num_attackers=args.num_attackers, eps0=args.eps0,
                      eps_inf=args.epsinf, iterations=args.iters, gamma=args.gamma,
                      targeted=targeted, edge_budget=args.edge_budget,
                      global_edges=args.global_edges, clamp_nonneg=args.clamp_nonneg)


def _config_from(args, spec: AttackSpec | None = None) -> ExperimentConfig:
    return ExperimentConfig(dataset=args.dataset, arch=args.model,
                            attack=spec or AttackSpec(),
                            seeds=_parse_seeds(args.seeds), hidden=args.hidden,
                            layers=args.layers, dropout=args.dropout, lr=args.lr,
                            weight_decay=args.weight_decay, max_epochs=args.max_epochs,
                            patience=args.patience)


def _report_summary(report) -> str:
    lines = []
    for entry in report.cells:
        am, asd = mean_std(entry.attacked)
        cm, _ = mean_std(entry.clean)
        sm, _ = mean_std(entry.success)
        lines.append(f"cell {entry.cell}: clean {100 * cm:.1f}  "
                     f"attacked {100 * am:.1f} +/- {100 * asd:.1f}  "
                     f"success {100 * sm:.1f}%  "
                     f"unattackable {entry.unattackable}  "
                     f"violations {entry.invariant_violations}")
    return "\n".join(lines)


def _finish(report, args) -> None:
    print(_report_summary(report))
    if args.out:
        path = write_report(report, args.out)
        print(f"report written to {path}")


def cmd_train(args) -> int:
    config = _config_from(args)
    g = load_bundle(args.dataset)
    for seed in config.seeds:
        tm = train(g, config.arch, config.train_config(seed))
        test_acc = accuracy(predict(tm.params, g), g, g.test_mask)
        print(f"seed {seed}: val {100 * tm.val_accuracy:.1f} (epoch {tm.best_epoch})  "
              f"test {100 * test_acc:.1f}")
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            ckpt = out / f"model_{config.arch}_seed{seed}.ckpt"
            save_checkpoint(tm.params, ckpt,
                            extra={"val_accuracy": tm.val_accuracy,
                                   "best_epoch": tm.best_epoch,
                                   "dataset": g.name})
            print(f"checkpoint written to {ckpt}")
    return 0


def cmd_attack(args) -> int:
    config = _config_from(args, _spec_from(args))
    _finish(run_experiment(config), args)
    return 0


def cmd_sweep(args) -> int:
    spec = _spec_from(args)
    config = _config_from(args, spec)
    eps0_grid = _parse_grid(args.eps0_grid) if args.eps0_grid else None
    epsinf_grid = _parse_grid(args.epsinf_grid) if args.epsinf_grid else None
    if args.attacker_counts:
        counts = [int(x) for x in _parse_grid(args.attacker_counts)]
        report = attacker_count_study(config, counts)
    else:
        report = sweep_eps(config, eps0_grid, epsinf_grid)
    _finish(report, args)
    return 0


def cmd_distance(args) -> int:
    config = _config_from(args, _spec_from(args))
    _finish(distance_study(config, max_distance=args.max_distance), args)
    return 0


def cmd_advtrain(args) -> int:
    base_cfg = _config_from(args)
    g = load_bundle(args.dataset)
    for seed in base_cfg.seeds:
        cfg = AdvTrainConfig(base_cfg.train_config(seed),
                             strategy=args.adv_strategy,
                             inner_eps0=args.eps0, inner_eps_inf=args.epsinf,
                             inner_iterations=args.adv_iters, inner_gamma=args.gamma)
        tm = adversarial_train(g, base_cfg.arch, cfg)
        test_acc = accuracy(predict(tm.params, g), g, g.test_mask)
        print(f"seed {seed}: val {100 * tm.val_accuracy:.1f} (epoch {tm.best_epoch})  "
              f"test {100 * test_acc:.1f}")
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            ckpt = out / f"advmodel_{base_cfg.arch}_seed{seed}.ckpt"
            save_checkpoint(tm.params, ckpt,
                            extra={"val_accuracy": tm.val_accuracy,
                                   "adv_config": {"strategy": args.adv_strategy,
                                                  "eps0": args.eps0,
                                                  "eps_inf": args.epsinf,
                                                  "iterations": args.adv_iters}})
            print(f"checkpoint written to {ckpt}")
    return 0


def cmd_validate_bundle(args) -> int:
    g = load_bundle(args.bundle)
    print(f"{g.name}: {g.n} nodes, {g.d} features ({g.feature_kind}), "
          f"{g.y_count} classes, {g.num_edges} edges, "
          f"splits {len(g.train_mask)}/{len(g.val_mask)}/{len(g.test_mask)}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="gnnevade", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train models, one per seed")
    _add_shared(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="attack every test node across seeds")
    _add_shared(p)
    _add_attack(p)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("sweep", help="budget sweeps and attacker-count studies")
    _add_shared(p)
    _add_attack(p)
    p.add_argument("--eps0-grid", default=None)
    p.add_argument("--epsinf-grid", default=None)
    p.add_argument("--attacker-counts", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("distance", help="accuracy vs attacker-victim distance")
    _add_shared(p)
    _add_attack(p)
    p.add_argument("--max-distance", type=int, default=8)
    p.set_defaults(fn=cmd_distance)

    p = sub.add_parser("advtrain", help="adversarial training")
    _add_shared(p)
    p.add_argument("--adv-strategy", default="random", choices=["random", "topology"])
    p.add_argument("--adv-iters", type=int, default=5)
    p.add_argument("--eps0", type=float, default=0.01)
    p.add_argument("--epsinf", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.set_defaults(fn=cmd_advtrain)

    p = sub.add_parser("validate-bundle", help="validate a graph bundle file")
    p.add_argument("bundle")
    p.set_defaults(fn=cmd_validate_bundle)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (ConfigError, AttackError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except GraphError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
