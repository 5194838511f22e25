"""Case-study drivers. Each (task, optimizer, seed) job owns one output directory."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..diagnostics import alignment_pair, snapshot
from ..dynamics import MismatchPrediction
from ..losses import LossSpec, loss_value, mismatch
from ..net import Batch, ParamVector, forward, init_params, linearize
from ..optimizers import MATRICES, Optimizer, TrainTrace, with_alignment
from ..sketch import SketchConfig
from ..valueiter import (
    DoubleIntegratorEnv,
    ValueGrid,
    dp_oracle,
    eval_grid,
    fitted_vi_run,
    network_value,
    policy_agreement,
)
from .config import ExperimentConfig, OptimizerConfig
from .data import MnistDataset, load_mnist_idx, regression_target, unit_square_grid
from .records import emit_csv, save_checkpoint

log = logging.getLogger(__name__)

PREDICTED_FLOW = {"G": "GGN", "G_J": "G_J"}


@dataclass
class JobResult:
    directory: Path
    summary: dict
    traces: list[TrainTrace] = field(default_factory=list)


def job_dir(root, task: str, opt: OptimizerConfig, seed: int) -> Path:
    d = Path(root) / task / opt.name / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _snapshot_cfg(cfg: ExperimentConfig) -> SketchConfig:
    lg = cfg.logging
    return SketchConfig(
        rank=int(lg.get("snapshot_rank", 75)),
        oversketch=int(lg.get("snapshot_oversketch", 10)),
        mode=lg.get("snapshot_sketch_type", "one_pass"),
        tolerance=float(lg.get("snapshot_tolerance", 1e-14)),
    )


def regression_batches(cfg: ExperimentConfig) -> tuple[Batch, Batch]:
    Xtr = unit_square_grid(int(cfg.data["train_grid"]))
    Xev = unit_square_grid(int(cfg.data["eval_grid"]))
    return Batch(Xtr, regression_target(Xtr)), Batch(Xev, regression_target(Xev))


def _mse(params: ParamVector, batch: Batch) -> float:
    return float(np.mean((forward(params, batch) - batch.targets) ** 2))


def train_regression_job(cfg: ExperimentConfig, opt_cfg: OptimizerConfig, seed: int, out_root) -> JobResult:
    out = job_dir(out_root, cfg.task, opt_cfg, seed)
    loss = cfg.loss_spec()
    train, evalb = regression_batches(cfg)
    params = init_params(cfg.mlp(seed))
    opt = Optimizer(opt_cfg.spec, loss, params, seed=seed)
    align_every = int(cfg.logging.get("align_every", 0))
    levels = sorted((float(x) for x in cfg.logging.get("snapshot_losses", [])), reverse=True)
    snap_cfg = _snapshot_cfg(cfg)

    r0 = mismatch(loss, forward(params, train), train.targets)
    flow = PREDICTED_FLOW.get(opt_cfg.spec.kind)
    prediction = None
    if flow is not None:
        prediction = MismatchPrediction(loss.kind, flow, r0, q=getattr(loss, "q", None))
    ode_rows = [{"iteration": -1, "tau": 0.0, "residual_norm": float(np.linalg.norm(r0)),
                 "predicted_norm": float(np.linalg.norm(r0)) if prediction else None, "deviation": 0.0 if prediction else None}]
    traces, align_rows, snap_rows = [], [], []
    start = time.perf_counter()
    for k in range(opt_cfg.steps):
        old = params
        params, trace = opt.step(params, train)
        if align_every and k % align_every == 0:
            lin = linearize(old, train)
            am, af = alignment_pair(lin, loss, train.targets, params.values - old.values)
            trace = with_alignment(trace, am, af)
            align_rows.append({"iteration": k, "loss": trace.loss, "alignment_mismatch": am, "alignment_funcgrad": af})
        traces.append(trace)
        r = mismatch(loss, forward(params, train), train.targets)
        row = {"iteration": k, "tau": trace.cumulative_tau, "residual_norm": float(np.linalg.norm(r)),
               "predicted_norm": None, "deviation": None}
        if prediction is not None:
            pred = prediction(trace.cumulative_tau)
            row["predicted_norm"] = float(np.linalg.norm(pred))
            row["deviation"] = float(np.linalg.norm(r - pred) / max(np.linalg.norm(pred), 1e-300))
        ode_rows.append(row)
        while levels and trace.loss <= levels[0] and opt_cfg.spec.kind == "muon":
            level = levels.pop(0)
            table = snapshot(params, train, loss, sketch_cfg=snap_cfg, muon_state=opt.muon,
                             source=f"muon_seed{seed}_step{k}")
            snap_rows.extend(dict(r, target_level=level, iteration=k) for r in table.to_records())
            save_checkpoint(out / f"snapshot_{level:g}.npz", params, iteration=k, loss=trace.loss)
        if not math.isfinite(trace.loss):
            log.warning("non-finite loss at step %d; stopping job", k)
            break
    runtime = time.perf_counter() - start

    emit_csv(traces, out / "traces.csv")
    emit_csv(align_rows, out / "alignment.csv",
             fields=["iteration", "loss", "alignment_mismatch", "alignment_funcgrad"])
    emit_csv(ode_rows, out / "mismatch_ode.csv",
             fields=["iteration", "tau", "residual_norm", "predicted_norm", "deviation"])
    if snap_rows:
        emit_csv(snap_rows, out / "alignment_snapshots.csv")
    save_checkpoint(out / "final.npz", params, task=cfg.task, optimizer=opt_cfg.name, seed=seed)
    summary = {
        "task": cfg.task,
        "optimizer": opt_cfg.name,
        "seed": seed,
        "steps": len(traces),
        "final_loss": traces[-1].loss if traces else loss_value(loss, forward(params, train), train.targets),
        "best_loss": min((t.loss for t in traces), default=None),
        "final_eval_mse": _mse(params, evalb),
        "final_rank": traces[-1].sketch_rank if traces else None,
        "runtime_s": runtime,
    }
    emit_csv([summary], out / "summary.csv")
    return JobResult(out, summary, traces)


# MNIST ------------------------------------------------------------------------------


def mnist_data(cfg: ExperimentConfig) -> tuple[MnistDataset, MnistDataset]:
    train = load_mnist_idx(cfg.path("train_images"), cfg.path("train_labels"))
    test = load_mnist_idx(cfg.path("test_images"), cfg.path("test_labels"))
    if "subset" in cfg.data:
        train = train.subset(slice(0, int(cfg.data["subset"])))
    return train, test


def accuracy(params: ParamVector, data: MnistDataset) -> float:
    logits = forward(params, data.images)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded shuffle; the final short batch is kept."""
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def train_mnist_job(
    cfg: ExperimentConfig,
    opt_cfg: OptimizerConfig,
    seed: int,
    out_root,
    data: Optional[tuple[MnistDataset, MnistDataset]] = None,
) -> JobResult:
    out = job_dir(out_root, cfg.task, opt_cfg, seed)
    loss = cfg.loss_spec()
    train, test = mnist_data(cfg) if data is None else data
    bs = int(cfg.data["batch_size"])
    per_epoch = math.ceil(len(train) / bs)
    steps = opt_cfg.steps if opt_cfg.steps is not None else opt_cfg.epochs * per_epoch
    spec = opt_cfg.spec
    if spec.total_steps == 0:
        spec = replace(spec, total_steps=steps)
    params = init_params(cfg.mlp(seed))
    opt = Optimizer(spec, loss, params, seed=seed)
    rng = np.random.default_rng(seed)
    eval_every = int(cfg.data.get("eval_every", 1))
    targets = train.one_hot()
    traces, acc_rows = [], [{"iteration": -1, "epoch": 0, "test_accuracy": accuracy(params, test)}]
    start = time.perf_counter()
    k = 0
    epoch = 0
    while k < steps:
        for idx in epoch_batches(len(train), bs, rng):
            if k >= steps:
                break
            batch = Batch(train.images[idx], targets[idx])
            params, trace = opt.step(params, batch)
            traces.append(trace)
            if k % eval_every == 0 or k == steps - 1:
                acc_rows.append({"iteration": k, "epoch": epoch, "test_accuracy": accuracy(params, test)})
            k += 1
        epoch += 1
    runtime = time.perf_counter() - start
    accs = [r["test_accuracy"] for r in acc_rows[1:]] or [acc_rows[0]["test_accuracy"]]
    best = int(np.argmax(accs))
    emit_csv(traces, out / "traces.csv")
    emit_csv(acc_rows, out / "accuracy.csv", fields=["iteration", "epoch", "test_accuracy"])
    emit_csv([], out / "alignment.csv", fields=["iteration", "loss", "alignment_mismatch", "alignment_funcgrad"])
    save_checkpoint(out / "final.npz", params, task=cfg.task, optimizer=opt_cfg.name, seed=seed)
    summary = {
        "task": cfg.task,
        "optimizer": opt_cfg.name,
        "seed": seed,
        "steps": len(traces),
        "steps_per_epoch": per_epoch,
        "final_loss": traces[-1].loss if traces else None,
        "best_accuracy": accs[best],
        "best_iteration": acc_rows[1:][best]["iteration"] if len(acc_rows) > 1 else -1,
        "final_accuracy": accs[-1],
        "runtime_s": runtime,
    }
    emit_csv([summary], out / "summary.csv")
    return JobResult(out, summary, traces)


# Double integrator --------------------------------------------------------------------


def di_env(cfg: ExperimentConfig) -> DoubleIntegratorEnv:
    box = cfg.data["box"]
    return DoubleIntegratorEnv(
        dt=float(cfg.data["dt"]),
        goal_eps=float(cfg.data["goal_eps"]),
        bounds=((float(box[0][0]), float(box[0][1])), (float(box[1][0]), float(box[1][1]))),
    )


def di_oracle(cfg: ExperimentConfig, env: DoubleIntegratorEnv) -> ValueGrid:
    res = int(cfg.data["oracle_resolution"])
    return dp_oracle(env, (res, res))


def train_double_integrator_job(
    cfg: ExperimentConfig,
    opt_cfg: OptimizerConfig,
    seed: int,
    out_root,
    oracle: Optional[ValueGrid] = None,
) -> JobResult:
    out = job_dir(out_root, cfg.task, opt_cfg, seed)
    env = di_env(cfg)
    oracle = di_oracle(cfg, env) if oracle is None else oracle
    start = time.perf_counter()
    result = fitted_vi_run(
        env,
        opt_cfg.spec,
        opt_cfg.steps,
        n_samples=int(cfg.data["n_samples"]),
        seed=seed,
        net=cfg.mlp(seed),
    )
    runtime = time.perf_counter() - start
    S = eval_grid(env, int(cfg.data["eval_grid"]))
    V = network_value(result.params)(S)
    V_star = oracle(S)
    agree = policy_agreement(network_value(result.params), env, S, oracle)
    emit_csv(result.traces, out / "traces.csv")
    emit_csv([], out / "alignment.csv", fields=["iteration", "loss", "alignment_mismatch", "alignment_funcgrad"])
    emit_csv(
        ({"x": s[0], "v": s[1], "value": v, "oracle_value": vs, "agreement": a}
         for s, v, vs, a in zip(S, V, V_star, agree)),
        out / "value_grid.csv",
        fields=["x", "v", "value", "oracle_value", "agreement"],
    )
    save_checkpoint(out / "final.npz", result.params, task=cfg.task, optimizer=opt_cfg.name, seed=seed)
    summary = {
        "task": cfg.task,
        "optimizer": opt_cfg.name,
        "seed": seed,
        "steps": len(result.traces),
        "final_loss": result.traces[-1].loss if result.traces else None,
        "value_rmse": float(np.sqrt(np.mean((V - V_star) ** 2))),
        "agreement_fraction": float(np.mean(agree > 0)),
        "runtime_s": runtime,
    }
    emit_csv([summary], out / "summary.csv")
    return JobResult(out, summary, result.traces)


# Dispatch ------------------------------------------------------------------------------


def run_regression(cfg: ExperimentConfig, out_root=None) -> list[JobResult]:
    root = cfg.out_dir if out_root is None else out_root
    return [train_regression_job(cfg, o, s, root) for o in cfg.optimizers for s in cfg.seeds]


def run_mnist(cfg: ExperimentConfig, out_root=None) -> list[JobResult]:
    root = cfg.out_dir if out_root is None else out_root
    data = mnist_data(cfg)
    return [train_mnist_job(cfg, o, s, root, data) for o in cfg.optimizers for s in cfg.seeds]


def run_double_integrator(cfg: ExperimentConfig, out_root=None) -> list[JobResult]:
    root = cfg.out_dir if out_root is None else out_root
    env = di_env(cfg)
    oracle = di_oracle(cfg, env)
    return [train_double_integrator_job(cfg, o, s, root, oracle) for o in cfg.optimizers for s in cfg.seeds]


RUNNERS = {
    "regression": run_regression,
    "mnist": run_mnist,
    "double_integrator": run_double_integrator,
}


def run(cfg: ExperimentConfig, out_root=None) -> list[JobResult]:
    return RUNNERS[cfg.task](cfg, out_root)


def snapshot_batch(cfg: ExperimentConfig, seed: int = 0) -> Batch:
    """The batch a checkpoint snapshot is evaluated on for each task."""
    if cfg.task == "regression":
        return regression_batches(cfg)[0]
    if cfg.task == "mnist":
        train, _ = mnist_data(cfg)
        idx = np.random.default_rng(seed).permutation(len(train))[: int(cfg.data["batch_size"])]
        return Batch(train.images[idx], train.one_hot()[idx])
    raise ValueError("snapshots are defined for supervised tasks only")
