"""TOML experiment configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..errors import ConfigError, UnsupportedError
from ..losses import LossSpec, make_loss
from ..net import MlpSpec
from ..optimizers import BASELINES, MATRICES, LineSearchGrid, OptimizerSpec
from ..sketch import SketchConfig

TASKS = ("regression", "mnist", "double_integrator")

TASK_DEFAULTS: dict[str, dict[str, Any]] = {
    "regression": {
        "loss": {"kind": "quartic"},
        "model": {"width": 50, "depth": 6, "activation": "swish", "init_scale": 1.8},
        "data": {"train_grid": 50, "eval_grid": 150},
    },
    "mnist": {
        "loss": {"kind": "cross_entropy"},
        "model": {"width": 128, "depth": 2, "activation": "swish", "init_scale": 1.8},
        "data": {"batch_size": 512, "eval_every": 1},
    },
    "double_integrator": {
        "loss": {"kind": "squared"},
        "model": {"width": 512, "depth": 2, "activation": "swish", "init_scale": 1.27},
        "data": {
            "dt": 0.1,
            "goal_eps": 0.1,
            "box": [[-2.0, 2.0], [-2.0, 2.0]],
            "n_samples": 4000,
            "eval_grid": 121,
            "oracle_resolution": 241,
        },
    },
}

IO = {"regression": (2, 1), "mnist": (784, 10), "double_integrator": (2, 1)}

OPTIMIZER_KEYS = {
    "name", "kind", "steps", "epochs", "rank", "oversketch", "sketch_type", "tolerance",
    "rank_cap", "adapt_rank", "line_search_max", "lr", "beta1", "beta2", "eps",
    "ns_steps", "muon_beta", "schedule",
}


@dataclass(frozen=True)
class OptimizerConfig:
    name: str
    spec: OptimizerSpec
    steps: Optional[int] = None
    epochs: Optional[int] = None


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    loss: dict
    model: dict
    optimizers: tuple[OptimizerConfig, ...]
    seeds: tuple[int, ...] = (0,)
    data: dict = field(default_factory=dict)
    logging: dict = field(default_factory=dict)
    out_dir: str = "runs"
    source: Optional[Path] = None

    def loss_spec(self) -> LossSpec:
        return make_loss(self.loss["kind"], float(self.loss.get("q", 2.0)))

    def mlp(self, seed: int) -> MlpSpec:
        n_in, n_out = IO[self.task]
        m = self.model
        return MlpSpec.mlp(
            n_in, int(m["width"]), int(m["depth"]), n_out,
            activation=m.get("activation", "swish"),
            init_scale=float(m["init_scale"]),
            seed=seed,
        )

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(int(s) for s in seeds))

    def path(self, key: str) -> Path:
        p = Path(self.data[key])
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p


def _optimizer(raw: dict, task: str) -> OptimizerConfig:
    unknown = set(raw) - OPTIMIZER_KEYS
    if unknown:
        raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
    kind = raw.get("kind")
    if kind not in MATRICES + BASELINES:
        raise ConfigError(f"optimizer kind must be one of {MATRICES + BASELINES}, got {kind!r}")
    sketch = None
    grid = LineSearchGrid.default()
    if kind in MATRICES:
        sketch = SketchConfig(
            rank=int(raw.get("rank", 75)),
            oversketch=int(raw.get("oversketch", 10)),
            mode=raw.get("sketch_type", "one_pass"),
            tolerance=float(raw.get("tolerance", 1e-14)),
            rank_cap=raw.get("rank_cap"),
        )
        if "line_search_max" in raw:
            grid = grid.scaled(float(raw["line_search_max"]))
    steps = raw.get("steps")
    epochs = raw.get("epochs")
    if task == "mnist":
        if epochs is None and steps is None:
            raise ConfigError("mnist optimizers need epochs or steps")
    elif steps is None:
        raise ConfigError(f"optimizer {kind} needs a step count")
    spec = OptimizerSpec(
        kind=kind,
        sketch=sketch,
        grid=grid,
        adapt_rank=bool(raw.get("adapt_rank", True)),
        lr=float(raw.get("lr", 1e-3)),
        betas=(float(raw.get("beta1", 0.9)), float(raw.get("beta2", 0.999))),
        eps=float(raw.get("eps", 1e-8)),
        ns_steps=int(raw.get("ns_steps", 5)),
        muon_beta=float(raw.get("muon_beta", 0.95)),
        schedule=raw.get("schedule", "cosine"),
        total_steps=int(steps or 0),
    )
    return OptimizerConfig(
        name=raw.get("name", kind),
        spec=spec,
        steps=None if steps is None else int(steps),
        epochs=None if epochs is None else int(epochs),
    )


def _merged(defaults: dict, given: dict) -> dict:
    out = dict(defaults)
    out.update(given)
    return out


def parse_config(raw: dict, source: Optional[Path] = None) -> ExperimentConfig:
    task = raw.get("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    defaults = TASK_DEFAULTS[task]
    opts = raw.get("optimizers", [])
    if "optimizer" in raw:
        opts = [raw["optimizer"]] + list(opts)
    if not opts:
        raise ConfigError("no optimizers configured")
    seeds = tuple(int(s) for s in raw.get("seeds", [0]))
    if not seeds:
        raise ConfigError("seeds must be nonempty")
    cfg = ExperimentConfig(
        task=task,
        loss=_merged(defaults["loss"], raw.get("loss", {})),
        model=_merged(defaults["model"], raw.get("model", {})),
        optimizers=tuple(_optimizer(o, task) for o in opts),
        seeds=seeds,
        data=_merged(defaults["data"], raw.get("data", {})),
        logging=dict(raw.get("logging", {})),
        out_dir=str(raw.get("out_dir", "runs")),
        source=source,
    )
    loss = cfg.loss_spec()
    for o in cfg.optimizers:
        try:
            o.spec.check_loss(loss)
        except UnsupportedError as exc:
            raise ConfigError(f"optimizer {o.name}: {exc}") from exc
    if task == "double_integrator" and (loss.kind != "q_power" or loss.q != 2.0):
        raise ConfigError("fitted value iteration regresses with the squared loss")
    if task == "mnist":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in cfg.data:
                raise ConfigError(f"mnist config needs data.{key}")
            if not cfg.path(key).exists():
                raise ConfigError(f"data.{key} does not exist: {cfg.path(key)}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw, source=path)
