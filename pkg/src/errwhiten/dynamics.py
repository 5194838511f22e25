"""Predicted mismatch trajectories r(tau) under idealized Gauss-Newton flows.

Under a full-row-rank Jacobian, G_J makes the mismatch follow
dr/dtau = -grad_r l_hat (per sample), while the loss-weighted GGN divides that
by the function-space curvature. For the losses below the resulting ODEs are
solved in closed form componentwise; the cross-entropy G_J flow is integrated
with classical RK4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError, UnsupportedError

LOSS_KINDS = ("q_power", "squared", "quartic", "log_cosh", "hinge", "cross_entropy")
OPTIMIZER_KINDS = ("G_J", "GGN", "GD")


def _canonical(loss_kind: str, q: Optional[float]) -> tuple[str, float]:
    if loss_kind == "squared":
        return "q_power", 2.0
    if loss_kind == "quartic":
        return "q_power", 4.0
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return loss_kind, (2.0 if q is None else float(q))


def _optimizer(kind: str) -> str:
    kind = "GGN" if kind == "G" else kind
    if kind not in OPTIMIZER_KINDS:
        raise ValueError(f"unknown optimizer kind {kind!r}")
    return kind


def _q_power_gj(r0: np.ndarray, tau: float, q: float) -> np.ndarray:
    if q == 2.0:
        return r0 * np.exp(-tau)
    a = np.abs(r0) ** (q - 2.0)
    return r0 * (1.0 + (q - 2.0) * a * tau) ** (-1.0 / (q - 2.0))


def predict(
    loss_kind: str,
    optimizer_kind: str,
    r0,
    tau: float,
    *,
    q: Optional[float] = None,
    y=None,
    step: float = 1e-2,
) -> np.ndarray:
    """Mismatch at time ``tau`` starting from ``r0`` (any shape, componentwise).

    ``y`` (one-hot targets, same shape as ``r0``) is required for the
    cross-entropy G_J flow, which is integrated numerically with ``step``.
    """
    kind, q = _canonical(loss_kind, q)
    opt = _optimizer(optimizer_kind)
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    r0 = np.asarray(r0, dtype=np.float64)
    if opt == "GD":
        raise UnsupportedError("plain gradient flow depends on J J^T; use gd_reference")

    if kind == "q_power":
        if opt == "GGN":
            return r0 * np.exp(-tau / (q - 1.0))
        return _q_power_gj(r0, tau, q)
    if kind == "log_cosh":
        if opt == "GGN":
            return np.arctanh(np.tanh(r0) * np.exp(-tau))
        return np.arcsinh(np.sinh(r0) * np.exp(-tau))
    if kind == "hinge":
        if opt == "GGN":
            raise UnsupportedError("the hinge loss has no curvature, so the GGN flow is undefined")
        # inactive (negative) margins receive no gradient and stay put
        return np.where(r0 >= 0, np.maximum(r0 - tau, 0.0), r0)
    if opt == "GGN":
        return r0 * np.exp(-tau)
    if y is None:
        raise ValueError("cross-entropy G_J prediction needs the one-hot targets y")
    return integrate_cross_entropy_gj(r0, y, tau, step)


def _ce_rhs(r: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = r + y
    return -(p * r - p * (p * r).sum(axis=-1, keepdims=True))


def integrate_cross_entropy_gj(r0, y, tau: float, step: float = 1e-2) -> np.ndarray:
    """RK4 for dr/dtau = -(diag(p) - p p^T) r with p = r + y, per sample."""
    r = np.array(r0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if r.shape != y.shape:
        raise ShapeError(f"r0 {r.shape} and y {y.shape} differ")
    if not step > 0:
        raise ValueError("step must be positive")
    p = r + y
    if np.any(p < -1e-12) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-8):
        raise DomainError("r0 + y must be a probability vector per sample")
    t = 0.0
    while t < tau:
        h = min(step, tau - t)
        k1 = _ce_rhs(r, y)
        k2 = _ce_rhs(r + 0.5 * h * k1, y)
        k3 = _ce_rhs(r + 0.5 * h * k2, y)
        k4 = _ce_rhs(r + h * k3, y)
        r = r + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return r


def gd_reference(kernel, r0, loss_grad: Callable[[np.ndarray], np.ndarray], tau: float, step: float = 1e-2):
    """RK4 for plain gradient flow dr/dtau = -K grad_r l_hat(r) with a fixed kernel K."""
    K = np.asarray(kernel, dtype=np.float64)
    r = np.array(r0, dtype=np.float64).reshape(-1)
    rhs = lambda v: -K @ loss_grad(v)  # noqa: E731
    t = 0.0
    while t < tau:
        h = min(step, tau - t)
        k1 = rhs(r)
        k2 = rhs(r + 0.5 * h * k1)
        k3 = rhs(r + 0.5 * h * k2)
        k4 = rhs(r + h * k3)
        r = r + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return r.reshape(np.shape(r0))


@dataclass(frozen=True)
class MismatchPrediction:
    loss_kind: str
    optimizer_kind: str
    r0: np.ndarray
    q: Optional[float] = None
    y: Optional[np.ndarray] = None
    step: float = 1e-2

    def __call__(self, tau: float) -> np.ndarray:
        if tau == 0:
            return np.array(self.r0, dtype=np.float64)
        return predict(self.loss_kind, self.optimizer_kind, self.r0, tau, q=self.q, y=self.y, step=self.step)

    def evaluate(self, taus: Sequence[float]) -> list[np.ndarray]:
        return [self(t) for t in taus]


@dataclass(frozen=True)
class DeviationReport:
    taus: np.ndarray
    deviations: np.ndarray
    window: tuple[float, float]

    @property
    def in_window(self) -> np.ndarray:
        lo, hi = self.window
        return (self.taus >= lo) & (self.taus <= hi)

    @property
    def max_deviation(self) -> float:
        sel = self.deviations[self.in_window]
        return float(sel.max()) if sel.size else 0.0


def compare_trace(
    traces,
    empirical_residuals,
    prediction: MismatchPrediction,
    window: tuple[float, float] = (0.0, np.inf),
) -> DeviationReport:
    """Relative deviation ||r_emp - r_pred|| / ||r_pred|| at each tau_k.

    ``empirical_residuals`` holds the residual after each traced step, or one
    extra leading entry for the starting point at tau = 0.
    """
    taus = [t.cumulative_tau for t in traces]
    res = list(empirical_residuals)
    if len(res) == len(taus) + 1:
        taus = [0.0] + taus
    elif len(res) != len(taus):
        raise ShapeError(f"{len(res)} residuals for {len(taus)} traces")
    devs = []
    for tau, r in zip(taus, res):
        pred = prediction(tau)
        devs.append(np.linalg.norm(np.asarray(r) - pred) / max(np.linalg.norm(pred), np.finfo(float).tiny))
    return DeviationReport(np.asarray(taus, dtype=np.float64), np.asarray(devs), window)


def fit_log_decay_rate(taus, norms) -> float:
    """Slope c of the least-squares fit log ||r|| = a - c tau."""
    taus = np.asarray(taus, dtype=np.float64)
    norms = np.asarray(norms, dtype=np.float64)
    if taus.size < 2:
        raise ValueError("need at least two points to fit a rate")
    slope = np.polyfit(taus, np.log(norms), 1)[0]
    return float(-slope)
