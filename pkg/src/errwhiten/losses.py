"""Per-sample losses with the function-space objects the optimizers need.

Every loss is written as l(f, y) = l_hat(r) with mismatch r = psi(f, y). For a
batch of ``d`` samples with ``k`` outputs, ``outputs`` and ``targets`` are
``(d, k)`` arrays. Function-space gradients are returned stacked sample-major
(length ``d*k``) and carry the 1/d factor of the empirical mean; Hessian blocks
and mismatch Jacobians are per sample and do not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, UnsupportedError


def _pair(outputs, targets) -> tuple[np.ndarray, np.ndarray]:
    f = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if f.shape != y.shape:
        raise ShapeError(f"outputs {f.shape} and targets {y.shape} differ")
    return f, y


@dataclass(frozen=True)
class LossSpec:
    """Base loss. Subclasses fill in the per-sample pieces."""

    kind: str = "abstract"
    has_curvature = True

    def per_sample(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_grads(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of each l_i w.r.t. its own outputs, shape (d, k), no 1/d."""
        raise NotImplementedError

    def hess_blocks(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample k x k Hessians w.r.t. outputs, shape (d, k, k)."""
        raise NotImplementedError

    def mismatch(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def mismatch_jac_blocks(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-sample Jacobian of psi w.r.t. outputs, shape (d, k, k)."""
        raise NotImplementedError

    def mismatch_grad(self, r: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of l_hat w.r.t. the mismatch, shape (d, k)."""
        raise NotImplementedError

    def hess_matvec(self, f: np.ndarray, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Apply the per-sample Hessian blocks to ``u`` of shape (..., d, k)."""
        return np.einsum("dkj,...dj->...dk", self.hess_blocks(f, y), u)

    def check_twice_differentiable(self, f: np.ndarray, y: np.ndarray) -> None:
        return None


@dataclass(frozen=True)
class QPower(LossSpec):
    """l = |r|^q / q with r = f - y. q=2 is half the squared error."""

    kind: str = "q_power"
    q: float = 2.0

    def __post_init__(self):
        if self.q < 2:
            raise DomainError(f"q must be >= 2, got {self.q}")
        if float(self.q).is_integer() and int(self.q) % 2 == 1:
            raise DomainError("odd integer q is not a loss; use an even q")

    def per_sample(self, f, y):
        return (np.abs(f - y) ** self.q).sum(axis=1) / self.q

    def sample_grads(self, f, y):
        return self.mismatch_grad(f - y, y)

    def mismatch_grad(self, r, y):
        if self.q == 2:
            return r.copy()
        return np.abs(r) ** (self.q - 2) * r

    def hess_blocks(self, f, y):
        r = f - y
        diag = np.ones_like(r) if self.q == 2 else (self.q - 1) * np.abs(r) ** (self.q - 2)
        return diag[:, :, None] * np.eye(r.shape[1])

    def hess_matvec(self, f, y, u):
        if self.q == 2:
            return np.array(u, copy=True)
        return (self.q - 1) * np.abs(f - y) ** (self.q - 2) * u

    def mismatch(self, f, y):
        return f - y

    def mismatch_jac_blocks(self, f, y):
        return np.broadcast_to(np.eye(f.shape[1]), (f.shape[0], f.shape[1], f.shape[1])).copy()


@dataclass(frozen=True)
class LogCosh(LossSpec):
    kind: str = "log_cosh"

    def per_sample(self, f, y):
        a = np.abs(f - y)
        return (a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)).sum(axis=1)

    def sample_grads(self, f, y):
        return np.tanh(f - y)

    def mismatch_grad(self, r, y):
        return np.tanh(r)

    def hess_blocks(self, f, y):
        sech2 = 1.0 - np.tanh(f - y) ** 2
        return sech2[:, :, None] * np.eye(f.shape[1])

    def hess_matvec(self, f, y, u):
        return (1.0 - np.tanh(f - y) ** 2) * u

    def mismatch(self, f, y):
        return f - y

    def mismatch_jac_blocks(self, f, y):
        return np.broadcast_to(np.eye(f.shape[1]), (f.shape[0], f.shape[1], f.shape[1])).copy()


def softmax(f: np.ndarray) -> np.ndarray:
    z = f - f.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class CrossEntropy(LossSpec):
    """Softmax cross-entropy on logits with one-hot targets."""

    kind: str = "cross_entropy"

    def per_sample(self, f, y):
        m = f.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(f - m).sum(axis=1))
        return lse - (f * y).sum(axis=1)

    def sample_grads(self, f, y):
        return softmax(f) - y

    def hess_blocks(self, f, y):
        p = softmax(f)
        return p[:, :, None] * np.eye(f.shape[1]) - p[:, :, None] * p[:, None, :]

    def hess_matvec(self, f, y, u):
        p = softmax(f)
        return p * u - p * (p * u).sum(axis=-1, keepdims=True)

    def mismatch(self, f, y):
        return softmax(f) - y

    def mismatch_jac_blocks(self, f, y):
        return self.hess_blocks(f, y)

    def mismatch_grad(self, r, y):
        # l_hat(r) = -sum_j y_j log(r_j + y_j)
        p = r + y
        out = np.zeros_like(r)
        hot = y != 0
        out[hot] = -y[hot] / p[hot]
        return out


@dataclass(frozen=True)
class Hinge(LossSpec):
    """Binary hinge loss for labels in {-1, +1} and a single output."""

    kind: str = "hinge"
    has_curvature = False

    def per_sample(self, f, y):
        return np.maximum(0.0, 1.0 - y * f).sum(axis=1)

    def sample_grads(self, f, y):
        return -y * self.mismatch_grad(1.0 - y * f, y)

    def mismatch_grad(self, r, y):
        # the r = 0 point takes the active branch
        return (r >= 0).astype(np.float64)

    def hess_blocks(self, f, y):
        raise UnsupportedError("hinge loss has no function-space curvature (zero almost everywhere)")

    def hess_matvec(self, f, y, u):
        self.check_twice_differentiable(f, y)
        return np.zeros_like(u)

    def mismatch(self, f, y):
        return 1.0 - y * f

    def mismatch_jac_blocks(self, f, y):
        return -y[:, :, None] * np.eye(f.shape[1])

    def check_twice_differentiable(self, f, y):
        if np.any(1.0 - y * f == 0.0):
            raise DomainError("hinge loss is not differentiable where the margin is exactly 1")


def q_power(q: float = 2.0) -> QPower:
    return QPower(q=float(q))


def log_cosh() -> LogCosh:
    return LogCosh()


def cross_entropy() -> CrossEntropy:
    return CrossEntropy()


def hinge() -> Hinge:
    return Hinge()


def make_loss(kind: str, q: float = 2.0) -> LossSpec:
    if kind in ("q_power", "squared", "quartic"):
        q = {"squared": 2.0, "quartic": 4.0}.get(kind, q)
        return q_power(q)
    factories = {"log_cosh": log_cosh, "cross_entropy": cross_entropy, "hinge": hinge}
    if kind not in factories:
        raise ValueError(f"unknown loss kind {kind!r}")
    return factories[kind]()


# Functional surface -----------------------------------------------------------


def loss_value(spec: LossSpec, outputs, targets) -> float:
    """Empirical mean of the per-sample loss."""
    f, y = _pair(outputs, targets)
    return float(spec.per_sample(f, y).mean())


def func_grad(spec: LossSpec, outputs, targets) -> np.ndarray:
    f, y = _pair(outputs, targets)
    return (spec.sample_grads(f, y) / f.shape[0]).reshape(-1)


def func_hess_block(spec: LossSpec, outputs_i, target_i) -> np.ndarray:
    f, y = _pair(np.atleast_1d(outputs_i)[None, :], np.atleast_1d(target_i)[None, :])
    return spec.hess_blocks(f, y)[0]


def mismatch(spec: LossSpec, outputs, targets) -> np.ndarray:
    f, y = _pair(outputs, targets)
    return spec.mismatch(f, y).reshape(-1)


def mismatch_jacobian_block(spec: LossSpec, outputs_i, target_i) -> np.ndarray:
    f, y = _pair(np.atleast_1d(outputs_i)[None, :], np.atleast_1d(target_i)[None, :])
    return spec.mismatch_jac_blocks(f, y)[0]
