"""Training steps: sketched Gauss-Newton / Newton with a grid line search,
plus Adam and Muon baselines, all producing ``TrainTrace`` records."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, EmptySketchError, LineSearchError, UnsupportedError
from .losses import LossSpec, loss_value
from .net import Batch, Linearization, ParamVector, forward, linearize
from .sketch import SketchConfig, SketchedEig, gated_rank_update, precondition, randomized_eig, sufficiency

MATRICES = ("G", "G_J", "H")
BASELINES = ("adam", "muon", "gd")


# Line search ------------------------------------------------------------------


@dataclass(frozen=True)
class LineSearchGrid:
    candidates: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(x) for x in self.candidates)
        if not c:
            raise ConfigError("line-search grid is empty")
        if any(not x > 0 or not math.isfinite(x) for x in c):
            raise ConfigError("line-search candidates must be positive and finite")
        object.__setattr__(self, "candidates", c)

    @classmethod
    def default(cls) -> "LineSearchGrid":
        """linspace(0.5, 1, 6) followed by 2^-k for k in linspace(2, 30, 25), descending."""
        top = np.linspace(0.5, 1.0, 6)[::-1]
        tail = 2.0 ** -np.linspace(2.0, 30.0, 25)
        return cls(tuple(top) + tuple(tail))

    def scaled(self, largest: float) -> "LineSearchGrid":
        """Same shape of grid with its largest candidate moved to ``largest``."""
        s = largest / max(self.candidates)
        return LineSearchGrid(tuple(c * s for c in self.candidates))


def grid_line_search(
    params: ParamVector,
    direction: np.ndarray,
    grid: LineSearchGrid,
    loss_eval: Callable[[ParamVector], float],
) -> tuple[float, float]:
    """Evaluate the loss at every candidate; return the argmin, ties to the larger step."""
    direction = np.asarray(direction, dtype=np.float64)
    if not np.all(np.isfinite(direction)):
        raise LineSearchError("search direction is not finite")
    best_eta, best_loss = None, math.inf
    for eta in sorted(grid.candidates, reverse=True):
        val = float(loss_eval(params + eta * direction))
        if math.isnan(val):
            continue
        if best_eta is None or val < best_loss:
            best_eta, best_loss = eta, val
    if best_eta is None:
        raise LineSearchError("every line-search candidate produced NaN")
    return best_eta, best_loss


# Traces -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainTrace:
    """One optimizer iteration. ``loss`` is measured after the step."""

    iteration: int
    loss: float
    step_size: float
    cumulative_tau: float
    sketch_rank: Optional[int] = None
    sufficiency: Optional[float] = None
    alignment_mismatch: Optional[float] = None
    alignment_funcgrad: Optional[float] = None
    estimated_rank: Optional[int] = None
    flag: str = ""


# Sketched steps -----------------------------------------------------------------


def curvature_operator(lin: Linearization, loss: LossSpec, targets, matrix: str):
    """Block matvec for G (GGN), G_J (Jacobian-only) or H (full Hessian)."""
    if matrix == "G":
        if not loss.has_curvature:
            raise UnsupportedError(f"G is undefined for the {loss.kind} loss")
        return lambda V: lin.ggn_matvec(loss, targets, V)
    if matrix == "G_J":
        return lin.gj_matvec
    if matrix == "H":
        return lambda V: lin.hvp(loss, targets, V)
    raise ConfigError(f"unknown matrix {matrix!r}; expected one of {MATRICES}")


@dataclass(frozen=True)
class SketchedDirection:
    direction: np.ndarray
    grad: np.ndarray
    decomp: Optional[SketchedEig]
    sufficiency: Optional[float]
    flag: str = ""


def sketched_direction(
    lin: Linearization,
    loss: LossSpec,
    targets,
    matrix: str,
    cfg: SketchConfig,
    rng: Optional[np.random.Generator] = None,
) -> SketchedDirection:
    """-U L^-1 U^T grad for the sketched matrix, or -grad if the sketch is empty."""
    matvec = curvature_operator(lin, loss, targets, matrix)
    grad = lin.grad(loss, targets)
    decomp = randomized_eig(matvec, lin.p, cfg, rng)
    try:
        step = precondition(decomp, grad)
        suff = sufficiency(decomp, grad, matvec)
    except EmptySketchError:
        return SketchedDirection(-grad, grad, decomp, None, "fallback")
    return SketchedDirection(-step, grad, decomp.with_sufficiency(suff), suff)


def sketched_step(
    params: ParamVector,
    batch: Batch,
    loss: LossSpec,
    matrix: str,
    cfg: SketchConfig,
    grid: LineSearchGrid,
    *,
    iteration: int = 0,
    tau: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[ParamVector, TrainTrace]:
    lin = linearize(params, batch)
    sd = sketched_direction(lin, loss, batch.targets, matrix, cfg, rng)
    current = loss_value(loss, lin.outputs, batch.targets)
    evaluate = lambda q: loss_value(loss, forward(q, batch), batch.targets)  # noqa: E731
    eta, new_loss = grid_line_search(params, sd.direction, grid, evaluate)
    flag = sd.flag
    if new_loss > current:
        # no candidate descends: take the smallest step anyway so tau keeps moving
        eta = min(grid.candidates)
        new_loss = evaluate(params + eta * sd.direction)
        flag = "ascent" if not flag else f"{flag};ascent"
    decomp = sd.decomp
    trace = TrainTrace(
        iteration=iteration,
        loss=new_loss,
        step_size=eta,
        cumulative_tau=tau + eta,
        sketch_rank=cfg.rank,
        sufficiency=sd.sufficiency,
        estimated_rank=None if decomp is None else decomp.estimated_rank,
        flag=flag,
    )
    return params + eta * sd.direction, trace


# Schedules and first-order baselines --------------------------------------------


def cosine_schedule(t: int, total: int) -> float:
    """Multiplier decaying from 1 at t=0 to 0 at t=total."""
    if total <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(t, total) / total))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(state: AdamState, grad, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam. Returns (new_state, increment to add to the parameters)."""
    b1, b2 = betas
    grad = np.asarray(grad, dtype=np.float64)
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return AdamState(m, v, t), -lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(
    state: AdamState,
    params: ParamVector,
    grad,
    schedule_t: float = 1.0,
    *,
    lr: float = 1e-3,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[AdamState, ParamVector]:
    state, inc = adam_update(state, grad, lr * schedule_t, betas, eps)
    return state, params + inc


NS_COEFFS = (3.4445, -4.7750, 2.0315)


def newton_schulz(G: np.ndarray, steps: int = 5, eps: float = 1e-7) -> np.ndarray:
    """Approximate the orthogonal polar factor of G with the quintic iteration."""
    a, b, c = NS_COEFFS
    X = np.asarray(G, dtype=np.float64)
    tall = X.shape[0] > X.shape[1]
    if tall:
        X = X.T
    X = X / (np.linalg.norm(X) + eps)
    for _ in range(steps):
        A = X @ X.T
        B = b * A + c * A @ A
        X = a * X + B @ X
    return X.T if tall else X


@dataclass(frozen=True)
class MuonState:
    momenta: tuple[np.ndarray, ...]
    adam: AdamState


def muon_blocks(params: ParamVector) -> list[int]:
    """Layers whose weight matrix gets the orthogonalized update (hidden-to-hidden)."""
    return list(range(1, len(params.layout) - 1))


def muon_init(params: ParamVector) -> MuonState:
    moms = tuple(np.zeros(params.layout[i].weight_shape) for i in muon_blocks(params))
    return MuonState(moms, AdamState.zeros(len(params)))


def muon_step(
    state: MuonState,
    params: ParamVector,
    grad,
    schedule_t: float = 1.0,
    *,
    lr: float = 1e-3,
    beta: float = 0.95,
    ns_steps: int = 5,
    adam_betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[MuonState, ParamVector]:
    """Nesterov momentum + Newton-Schulz on hidden weights; Adam on everything else."""
    grad = np.asarray(grad, dtype=np.float64)
    lr_t = lr * schedule_t
    adam_state, inc = adam_update(state.adam, grad, lr_t, adam_betas, eps)
    moms = []
    for buf, i in zip(state.momenta, muon_blocks(params)):
        slot = params.layout[i]
        g = grad[slot.weight].reshape(slot.weight_shape)
        buf = beta * buf + (1 - beta) * g
        update = (1 - beta) * g + beta * buf
        ortho = newton_schulz(update, ns_steps)
        rows, cols = slot.weight_shape
        inc[slot.weight] = -lr_t * math.sqrt(max(1.0, rows / cols)) * ortho.reshape(-1)
        moms.append(buf)
    return MuonState(tuple(moms), adam_state), params + inc


# One interface over all optimizers ------------------------------------------------


@dataclass(frozen=True)
class OptimizerSpec:
    """What to run. ``kind`` is one of G, G_J, H, adam, muon, gd."""

    kind: str
    sketch: Optional[SketchConfig] = None
    grid: LineSearchGrid = field(default_factory=LineSearchGrid.default)
    adapt_rank: bool = True
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ns_steps: int = 5
    muon_beta: float = 0.95
    schedule: str = "cosine"
    total_steps: int = 0

    def __post_init__(self):
        if self.kind not in MATRICES + BASELINES:
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.kind in MATRICES and self.sketch is None:
            raise ConfigError(f"{self.kind} needs a sketch configuration")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.ns_steps < 1:
            raise ConfigError("ns_steps must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    @property
    def sketched(self) -> bool:
        return self.kind in MATRICES

    def check_loss(self, loss: LossSpec) -> None:
        if self.kind == "G" and not loss.has_curvature:
            raise UnsupportedError(f"G is undefined for the {loss.kind} loss")


class Optimizer:
    """Stateful driver that owns the rank, RNG stream, moments and the tau clock."""

    def __init__(self, spec: OptimizerSpec, loss: LossSpec, params: ParamVector, seed: int = 0):
        spec.check_loss(loss)
        self.spec = spec
        self.loss = loss
        self.iteration = 0
        self.tau = 0.0
        self.rng = np.random.default_rng(seed if spec.sketch is None else spec.sketch.seed + seed)
        self.sketch = spec.sketch
        if spec.sketch is not None:
            cap = spec.sketch.cap_for(len(params))
            self.sketch = spec.sketch.with_rank(min(spec.sketch.rank, cap))
        self.adam = AdamState.zeros(len(params))
        self.muon = muon_init(params) if spec.kind == "muon" else None

    def _schedule(self) -> float:
        if self.spec.schedule == "constant":
            return 1.0
        return cosine_schedule(self.iteration, self.spec.total_steps)

    def step(self, params: ParamVector, batch: Batch) -> tuple[ParamVector, TrainTrace]:
        if self.spec.sketched:
            new, trace = sketched_step(
                params,
                batch,
                self.loss,
                self.spec.kind,
                self.sketch,
                self.spec.grid,
                iteration=self.iteration,
                tau=self.tau,
                rng=self.rng,
            )
            if self.spec.adapt_rank and trace.sufficiency is not None:
                nxt = gated_rank_update(
                    self.sketch.rank,
                    trace.estimated_rank,
                    trace.sufficiency,
                    self.sketch.cap_for(len(params)),
                    oversketch=self.sketch.oversketch,
                )
                self.sketch = self.sketch.with_rank(nxt)
        else:
            new, trace = self._first_order(params, batch)
        self.iteration += 1
        self.tau = trace.cumulative_tau
        return new, trace

    def _first_order(self, params: ParamVector, batch: Batch) -> tuple[ParamVector, TrainTrace]:
        lin = linearize(params, batch)
        grad = lin.grad(self.loss, batch.targets)
        mult = self._schedule()
        lr_t = self.spec.lr * mult
        if self.spec.kind == "adam":
            self.adam, new = adam_step(self.adam, params, grad, mult, lr=self.spec.lr, betas=self.spec.betas, eps=self.spec.eps)
        elif self.spec.kind == "muon":
            self.muon, new = muon_step(
                self.muon,
                params,
                grad,
                mult,
                lr=self.spec.lr,
                beta=self.spec.muon_beta,
                ns_steps=self.spec.ns_steps,
                adam_betas=self.spec.betas,
                eps=self.spec.eps,
            )
        else:
            new = params - lr_t * grad
        new_loss = loss_value(self.loss, forward(new, batch), batch.targets)
        trace = TrainTrace(self.iteration, new_loss, lr_t, self.tau + lr_t)
        return new, trace


def with_alignment(trace: TrainTrace, mismatch: float, funcgrad: float) -> TrainTrace:
    return replace(trace, alignment_mismatch=mismatch, alignment_funcgrad=funcgrad)
