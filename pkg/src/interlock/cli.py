"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.

``train``     train every seed of a config; writes metrics, checkpoint, results row
``simulate``  print simulated and closed-form makespans plus a per-accelerator table
``sweep``     cross product of strategies x depths x seeds into one long-form table
``gradcheck`` finite-difference check of routed gradients on a small model
``eval``      accuracy table for a checkpoint
``summarize`` final accuracies and losses re-read from a metrics file
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace

import numpy as np

from .config import RunConfig, apply_overrides, load_config, parse_config, serialize_config, strategy_from_label, strategy_label
from .errors import ConfigurationError, InterlockError
from .io import append_results, read_checkpoint, read_metrics, restore_model, results_row
from .model import ArchitectureSpec, build
from .routing import check_routed_gradients
from .schedule import PipelineConfig, closed_form_timesteps, simulate, staleness
from .engine import evaluate
from . import runner

CONFIG_KEYS = [line.split(" = ", 1)[0] for line in serialize_config(RunConfig()).splitlines()]


def _range(text: str) -> list[int]:
    """``3..10`` (inclusive) or ``1,2,5``."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",") if t.strip()]


def _config_from_args(args) -> RunConfig:
    pairs = _pairs(args)
    if args.config:
        return load_config(args.config, pairs)
    return apply_overrides(RunConfig(), pairs).validate()


def _pairs(args) -> dict[str, str]:
    pairs = {}
    for key in CONFIG_KEYS:
        v = getattr(args, "cfg_" + key.replace(".", "__"), None)
        if v is not None:
            pairs[key] = v
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    group = p.add_argument_group("config fields (override file values)")
    for key in CONFIG_KEYS:
        group.add_argument(f"--{key}", dest="cfg_" + key.replace(".", "__"), metavar="V")


def _overridden(args) -> bool:
    return bool(args.config or args.set or any(getattr(args, "cfg_" + k.replace(".", "__"), None) for k in CONFIG_KEYS))


def cmd_train(args) -> int:
    if args.resume:
        cfg = None
        if _overridden(args):
            base = parse_config(read_checkpoint(args.resume).header["config"])
            cfg = _config_from_args(args) if args.config else apply_overrides(base, _pairs(args)).validate()
        runs = [runner.resume_seed(args.resume, cfg)]
    else:
        cfg = _config_from_args(args)
        runs = runner.run_config(cfg, runner.output_root(cfg))
    for run in runs:
        test = run.metrics.final_eval("test")
        heads = " ".join(f"{a:.4f}" for a in test.head_accuracy)
        print(f"seed {run.seed}: test accuracy per head {heads}; files in {run.directory}")
    return 0


def cmd_simulate(args) -> int:
    strat = strategy_from_label(args.strategy) if args.strategy not in ("n_wise", "grouped_local") else None
    if strat is None:
        if args.n is None:
            raise ConfigurationError(f"--n is required for strategy {args.strategy}")
        kind, n, mix = args.strategy, args.n, args.mix_local
    else:
        kind, n, mix = strat.kind, (args.n if args.n is not None else strat.n), strat.mix_local or args.mix_local
    cfg = PipelineConfig(args.a, args.b, kind, n, mix, args.forward_cost, args.backward_cost, args.latency)
    trace = simulate(cfg)
    unit = args.forward_cost == args.backward_cost == 1 and args.latency == 0
    closed = closed_form_timesteps(kind, args.a, args.b, n if kind in ("n_wise", "grouped_local") else None) if unit else None
    print(f"{trace.makespan} {closed if closed is not None else 'n/a'}")
    stale = staleness(trace)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["accelerator", "utilization", "staleness_steady", "staleness_max"])
    for k, u in enumerate(trace.utilization, start=1):
        comp = stale.component(k)
        w.writerow([k, f"{u:.6f}", comp[-1], max(comp)])
    if args.trace or args.records:
        rows = [[e.accelerator, e.slot, e.batch, e.phase, e.loss, e.duration] for e in trace.events]
        header = ["accelerator", "slot", "batch", "phase", "loss", "duration"]
        if args.trace:
            with open(args.trace, "w", newline="") as fh:
                tw = csv.writer(fh, lineterminator="\n")
                tw.writerow(header)
                tw.writerows(rows)
        if args.records:
            w.writerow(header)
            w.writerows(rows)
    if closed is not None and closed != trace.makespan:
        print(f"simulated makespan {trace.makespan} differs from closed form {closed}", file=sys.stderr)
        return 1
    return 0


def _with_depth(cfg: RunConfig, depth: int) -> RunConfig:
    m = cfg.model
    if m.preset == "toy_conv":
        m = replace(m, depth=depth)
    elif m.preset == "mlp":
        m = replace(m, widths=(m.widths[0],) * depth)
    else:
        m = replace(m, blocks=depth)
    return replace(cfg, model=m)


def sweep_plan(cfg: RunConfig, strategies: list[str], depths: list[int], seeds: list[int]) -> list[tuple]:
    plan = []
    for label in strategies:
        strat = strategy_from_label(label)
        for d in depths:
            for s in seeds:
                plan.append((strat, d, s))
    return plan


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    seeds = list(cfg.seeds)
    depths = _range(args.depths) if args.depths else [cfg.model.depth]
    plan = sweep_plan(cfg, args.strategies.split(","), depths, seeds)
    for strat, d, _ in plan:
        replace(_with_depth(cfg, d), strategy=strat).validate()
    if args.dry_run:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["strategy", "depth", "seed"])
        for strat, d, s in plan:
            w.writerow([strategy_label(strat), d, s])
        return 0
    root = runner.output_root(cfg) / cfg.name
    table = root / "sweep.csv"
    if table.exists():
        table.unlink()
    for strat, d, s in plan:
        run_cfg = replace(_with_depth(cfg, d), strategy=strat, seeds=(s,))
        label = strategy_label(strat)
        run = runner.run_seed(run_cfg, s, root / f"{label}_d{d}_seed{s}")
        append_results(table, [results_row(cfg.name, label, run.model.spec, s, run_cfg.train.mode, run.metrics)])
        print(f"{label} depth {d} seed {s}: test accuracy {run.metrics.final_eval('test').head_accuracy[-1]:.4f}")
    print(f"results: {table}")
    return 0


def cmd_gradcheck(args) -> int:
    strat = strategy_from_label(args.strategy)
    cfg = RunConfig(strategy=strat)
    if args.preset == "mlp":
        spec = ArchitectureSpec(preset="mlp", input_shape=(5,), num_classes=4, widths=(8,) * args.depth)
        shape = (5,)
    elif args.preset == "toy_conv":
        spec = ArchitectureSpec(preset="toy_conv", input_shape=(3, 6, 6), num_classes=4, depth=args.depth, filters=(4, 6))
        shape = (3, 6, 6)
    else:
        spec = ArchitectureSpec(preset="resnet_lite", input_shape=(3, 6, 6), num_classes=4, blocks=args.depth, res_width=4)
        shape = (3, 6, 6)
    spec.validate()
    model = build(spec, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch,) + shape)
    y = rng.integers(0, spec.num_classes, args.batch)
    checks = check_routed_gradients(model, cfg.policy(), x, y, eps=args.eps, max_coords=args.coords, seed=args.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["param", "component", "losses", "rel_error"])
    for c in checks:
        w.writerow([c.param_id, c.component, ";".join(map(str, c.losses)), f"{c.rel_error:.3e}"])
    worst = max(c.rel_error for c in checks)
    print(f"worst relative error {worst:.3e} over {len(checks)} parameters")
    return 0 if worst < args.tolerance else 1


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    if _overridden(args):
        cfg = _config_from_args(args)
    else:
        cfg = parse_config(ckpt.header["config"])
    model = restore_model(ckpt)
    ds = runner.build_dataset(cfg, ckpt.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["split", "kind", "index", "accuracy"])
    for split, (x, y) in (("train", ds.train), ("test", ds.test)):
        res = evaluate(model, x, y)
        for k, acc in enumerate(res.head_accuracy, start=1):
            w.writerow([split, "head", k, f"{acc:.6f}"])
        for m, acc in enumerate(res.ensemble_accuracy, start=1):
            w.writerow([split, "ensemble_top", m, f"{acc:.6f}"])
    return 0


def cmd_summarize(args) -> int:
    metrics = read_metrics(args.metrics)
    if not metrics.steps and not metrics.evals:
        raise ConfigurationError(f"{args.metrics} holds no rows")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["split", "kind", "index", "value"])
    if metrics.steps:
        tail = metrics.steps[-max(1, len(metrics.steps) // 10) :]
        for k in range(len(tail[0].losses)):
            w.writerow(["train", "loss_tail_mean", k + 1, f"{np.mean([r.losses[k] for r in tail]):.6f}"])
    for split in ("train", "test"):
        if not any(e.split == split for e in metrics.evals):
            continue
        ev = metrics.final_eval(split)
        for k, acc in enumerate(ev.head_accuracy, start=1):
            w.writerow([split, "head", k, f"{acc:.6f}"])
        for m, acc in enumerate(ev.ensemble_accuracy, start=1):
            w.writerow([split, "ensemble_top", m, f"{acc:.6f}"])
    last = metrics.steps[-1].step if metrics.steps else metrics.evals[-1].step
    print(f"{len(metrics.steps)} step rows, last step {last}, {len(metrics.evals)} eval rows")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="interlock", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config")
    _add_config_flags(p)
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue the run that wrote this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="pipeline schedule simulation")
    p.add_argument("--a", type=int, required=True, help="accelerators / components")
    p.add_argument("--b", type=int, required=True, help="training steps")
    p.add_argument("--strategy", default="1-wise", help="label such as 2-wise, grouped-2, end_to_end, hogwild")
    p.add_argument("--n", type=int, help="window or group size, overrides the label")
    p.add_argument("--mix-local", action="store_true")
    p.add_argument("--forward-cost", type=int, default=1)
    p.add_argument("--backward-cost", type=int, default=1)
    p.add_argument("--latency", type=int, default=0)
    p.add_argument("--trace", help="write the event trace to this CSV file")
    p.add_argument("--records", action="store_true", help="also print the trace to stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="strategy x depth x seed grid")
    _add_config_flags(p)
    p.add_argument("--strategies", required=True, help="comma-separated labels")
    p.add_argument("--depths", help="e.g. 3..10 or 3,6")
    p.add_argument("--dry-run", action="store_true", help="print the plan only")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of routed gradients")
    p.add_argument("--preset", default="toy_conv", choices=("toy_conv", "mlp", "resnet_lite"))
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--strategy", default="2-wise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--coords", type=int, default=12, help="sampled coordinates per parameter")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="accuracy table for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summarize", help="final accuracies and losses from a metrics file")
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (InterlockError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
