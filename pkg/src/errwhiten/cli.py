"""Command-line entry point: train, snapshot, oracle, diagnose."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

THREADS_ENV = "ERRWHITEN_NUM_THREADS"

log = logging.getLogger("errwhiten")


def _limit_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    from threadpoolctl import threadpool_limits

    threadpool_limits(int(value))


def cmd_train(args) -> int:
    from .experiments.config import load_config
    from .experiments.runners import run

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seeds([args.seed])
    out = args.out or cfg.out_dir
    for job in run(cfg, out):
        s = job.summary
        log.info("%s %s seed=%s -> %s", s["task"], s["optimizer"], s["seed"], job.directory)
        print(job.directory / "summary.csv")
    return 0


def cmd_snapshot(args) -> int:
    from .diagnostics import snapshot
    from .experiments.config import load_config
    from .experiments.records import emit_csv, load_checkpoint
    from .experiments.runners import _snapshot_cfg, snapshot_batch

    cfg = load_config(args.config)
    params, meta = load_checkpoint(args.checkpoint)
    batch = snapshot_batch(cfg)
    names = [o.spec.kind for o in cfg.optimizers if o.spec.kind in ("G", "G_J", "H", "muon")]
    names = names or ["G_J", "G", "H", "muon"]
    table = snapshot(params, batch, cfg.loss_spec(), names, _snapshot_cfg(cfg), source=str(args.checkpoint))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".alignment.csv")
    emit_csv(table.to_records(), out)
    print(out)
    return 0


def cmd_oracle(args) -> int:
    from .experiments.records import emit_csv
    from .valueiter import DoubleIntegratorEnv, dp_oracle, oracle_action

    if args.task != "double_integrator":
        raise SystemExit("only the double_integrator task has an oracle")
    env = DoubleIntegratorEnv(dt=args.dt, goal_eps=args.goal_eps)
    grid = dp_oracle(env, (args.resolution, args.resolution))
    S = grid.states
    action = oracle_action(grid, env, S)
    out = Path(args.out)
    emit_csv(
        ({"x": s[0], "v": s[1], "value": v, "action": a} for s, v, a in zip(S, grid.values.ravel(), action)),
        out / "oracle.csv",
        fields=["x", "v", "value", "action"],
    )
    emit_csv([{"resolution": args.resolution, "iterations": grid.iterations, "dt": env.dt,
               "goal_eps": env.goal_eps, "max_value": float(grid.values.max())}], out / "summary.csv")
    print(out / "oracle.csv")
    return 0


SUMMARY_METRICS = ("final_loss", "final_eval_mse", "best_accuracy", "final_accuracy",
                   "value_rmse", "agreement_fraction")


def cmd_diagnose(args) -> int:
    from .experiments.records import emit_csv, read_csv

    root = Path(args.traces)
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for path in sorted(root.rglob("summary.csv")):
        for row in read_csv(path):
            if "optimizer" in row:
                groups[(row.get("task"), row["optimizer"])].append(row)
    if not groups:
        print(f"no summary.csv files under {root}", file=sys.stderr)
        return 1
    rows = []
    for (task, name), runs in sorted(groups.items()):
        for metric in SUMMARY_METRICS:
            vals = np.array([r[metric] for r in runs if r.get(metric) is not None], dtype=float)
            if vals.size == 0:
                continue
            rows.append({"task": task, "optimizer": name, "metric": metric, "runs": vals.size,
                         "mean": vals.mean(), "min": vals.min(), "max": vals.max()})
    out = root / "diagnosis.csv"
    emit_csv(rows, out)
    for r in rows:
        print(f"{r['task']:>18} {r['optimizer']:>6} {r['metric']:>18}  mean {r['mean']:.4g}  "
              f"min {r['min']:.4g}  max {r['max']:.4g}  (n={r['runs']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="errwhiten", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run every optimizer/seed in a config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("snapshot", help="alignment table at a saved parameter point")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_snapshot)

    o = sub.add_parser("oracle", help="grid value-iteration reference")
    o.add_argument("--task", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--resolution", type=int, default=241)
    o.add_argument("--dt", type=float, default=0.1)
    o.add_argument("--goal-eps", type=float, default=0.1)
    o.set_defaults(func=cmd_oracle)

    d = sub.add_parser("diagnose", help="aggregate summary.csv files across seeds")
    d.add_argument("--traces", required=True)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _limit_threads()
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
