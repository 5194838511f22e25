"""Minimum-time double integrator: dynamics, fitted value iteration and a
grid dynamic-programming reference.

States are (position, velocity) rows; actions are accelerations in {-1, +1}.
Values count the expected number of steps to reach the goal ball.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError
from .losses import q_power
from .net import Batch, MlpSpec, ParamVector, forward, init_params
from .optimizers import Optimizer, OptimizerSpec, TrainTrace

ACTIONS = (-1.0, 1.0)

ValueFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DoubleIntegratorEnv:
    dt: float = 0.1
    goal_eps: float = 0.1
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((-2.0, 2.0), (-2.0, 2.0))

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.goal_eps > 0:
            raise ValueError("goal_eps must be positive")
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValueError("each bound needs lo < hi")

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    def in_goal(self, states) -> np.ndarray:
        return np.linalg.norm(np.asarray(states, dtype=np.float64), axis=-1) <= self.goal_eps

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, 2))


def step_env(env: DoubleIntegratorEnv, s, a) -> np.ndarray:
    """Semi-implicit Euler: velocity first, then position with the new velocity."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isin(a, ACTIONS)):
        raise ValueError("actions must be -1 or +1")
    v = s[..., 1] + a * env.dt
    x = s[..., 0] + v * env.dt
    return np.clip(np.stack([x, v], axis=-1), env.lower, env.upper)


def successors(env: DoubleIntegratorEnv, states) -> list[np.ndarray]:
    states = np.asarray(states, dtype=np.float64)
    return [step_env(env, states, np.full(states.shape[:-1], a)) for a in ACTIONS]


def network_value(params: ParamVector) -> ValueFn:
    return lambda S: forward(params, np.asarray(S, dtype=np.float64))[:, 0]


def value_targets(value_fn: ValueFn, states, env: DoubleIntegratorEnv) -> np.ndarray:
    """min_a (1 + V(f(s, a))) outside the goal ball, exactly 0 inside it."""
    states = np.asarray(states, dtype=np.float64)
    best = np.minimum(*[1.0 + value_fn(nxt) for nxt in successors(env, states)])
    return np.where(env.in_goal(states), 0.0, best)


# Grid reference ------------------------------------------------------------------


@dataclass(frozen=True)
class ValueGrid:
    xs: np.ndarray
    vs: np.ndarray
    values: np.ndarray  # shape (len(xs), len(vs))
    iterations: int = 0

    @property
    def states(self) -> np.ndarray:
        X, V = np.meshgrid(self.xs, self.vs, indexing="ij")
        return np.stack([X.ravel(), V.ravel()], axis=-1)

    def weights(self, states) -> sp.csr_matrix:
        return bilinear_weights(self.xs, self.vs, states)

    def __call__(self, states) -> np.ndarray:
        return self.weights(states) @ self.values.ravel()


def bilinear_weights(xs: np.ndarray, vs: np.ndarray, states) -> sp.csr_matrix:
    """Sparse (n_states, nx*nv) bilinear interpolation operator, clamped to the grid."""
    S = np.atleast_2d(np.asarray(states, dtype=np.float64))
    nx, nv = xs.size, vs.size
    x = np.clip(S[:, 0], xs[0], xs[-1])
    v = np.clip(S[:, 1], vs[0], vs[-1])
    i = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, nx - 2)
    j = np.clip(np.searchsorted(vs, v, side="right") - 1, 0, nv - 2)
    tx = (x - xs[i]) / (xs[i + 1] - xs[i])
    tv = (v - vs[j]) / (vs[j + 1] - vs[j])
    rows = np.repeat(np.arange(S.shape[0]), 4)
    cols = np.stack([i * nv + j, i * nv + j + 1, (i + 1) * nv + j, (i + 1) * nv + j + 1], axis=1).ravel()
    w = np.stack([(1 - tx) * (1 - tv), (1 - tx) * tv, tx * (1 - tv), tx * tv], axis=1).ravel()
    return sp.csr_matrix((w, (rows, cols)), shape=(S.shape[0], nx * nv))


def dp_oracle(
    env: DoubleIntegratorEnv,
    resolution: tuple[int, int] = (241, 241),
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> ValueGrid:
    """Value iteration of the min-time Bellman operator with bilinear interpolation."""
    xs = np.linspace(*env.bounds[0], resolution[0])
    vs = np.linspace(*env.bounds[1], resolution[1])
    grid = ValueGrid(xs, vs, np.zeros(resolution))
    S = grid.states
    goal = env.in_goal(S)
    P = [grid.weights(nxt) for nxt in successors(env, S)]
    V = np.zeros(S.shape[0])
    for it in range(1, max_iter + 1):
        new = np.where(goal, 0.0, 1.0 + np.minimum(P[0] @ V, P[1] @ V))
        change = np.max(np.abs(new - V))
        V = new
        if change < tol:
            return ValueGrid(xs, vs, V.reshape(resolution), it)
    raise NumericalError(f"value iteration did not reach {tol} in {max_iter} sweeps")


def bellman_residual(grid: ValueGrid, env: DoubleIntegratorEnv) -> float:
    """Sup-norm change from one more backup on the grid nodes."""
    S = grid.states
    backed = value_targets(grid, S, env)
    return float(np.max(np.abs(backed - grid.values.ravel())))


def oracle_action(grid: ValueGrid, env: DoubleIntegratorEnv, states) -> np.ndarray:
    """Greedy action sign under the oracle values; 0 where the actions tie."""
    lo, hi = [grid(n) for n in successors(env, states)]
    return np.sign(lo - hi)  # +1 when accelerating up is cheaper


def policy_agreement(value_fn: ValueFn, env: DoubleIntegratorEnv, states, oracle: ValueGrid) -> np.ndarray:
    """Per-state margin by which ``value_fn`` prefers the oracle's action.

    Values are costs, so the preferred action has the smaller Q; the margin is
    (Q(s, -1) - Q(s, +1)) * sgn(u*), positive when the orderings agree and 0 on
    ties of either side.
    """
    states = np.asarray(states, dtype=np.float64)
    q_minus, q_plus = [1.0 + value_fn(n) for n in successors(env, states)]
    return (q_minus - q_plus) * oracle_action(oracle, env, states)


def eval_grid(env: DoubleIntegratorEnv, n: int = 121) -> np.ndarray:
    xs = np.linspace(*env.bounds[0], n)
    vs = np.linspace(*env.bounds[1], n)
    X, V = np.meshgrid(xs, vs, indexing="ij")
    return np.stack([X.ravel(), V.ravel()], axis=-1)


# Fitted value iteration --------------------------------------------------------------


@dataclass
class FittedViResult:
    params: ParamVector
    traces: list[TrainTrace]
    states: np.ndarray


def fitted_vi_run(
    env: DoubleIntegratorEnv,
    optimizer: OptimizerSpec,
    steps: int,
    n_samples: int = 4000,
    seed: int = 0,
    net: Optional[MlpSpec] = None,
    callback: Optional[Callable[[int, ParamVector, TrainTrace], None]] = None,
) -> FittedViResult:
    """Alternate frozen Bellman targets with one optimizer step on their MSE."""
    net = MlpSpec.mlp(2, 512, 2, 1, init_scale=1.27, seed=seed) if net is None else net
    rng = np.random.default_rng(seed)
    states = env.sample_states(n_samples, rng)
    params = init_params(net)
    opt = Optimizer(optimizer, q_power(2), params, seed=seed)
    traces = []
    for k in range(steps):
        targets = value_targets(network_value(params), states, env)
        params, trace = opt.step(params, Batch(states, targets))
        traces.append(trace)
        if callback is not None:
            callback(k, params, trace)
    return FittedViResult(params, traces, states)
