"""Randomized low-rank PSD eigendecomposition from block matvecs.

The operator is only touched through ``matvec(V)`` with ``V`` a ``(p, s)``
block; it must return a ``(p, s)`` block. Eigenvalues at or below the
tolerance are discarded, which also clips any negative curvature.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, EmptySketchError, NumericalError

Matvec = Callable[[np.ndarray], np.ndarray]

MODES = ("one_pass", "two_pass")


@dataclass(frozen=True)
class SketchConfig:
    """Sketch sizes and truncation.

    ``rank`` is the number of eigenpairs kept for preconditioning and
    ``oversketch`` the extra probes drawn on top of it. ``rank_cap`` bounds
    the adaptive rank; ``None`` means "as large as the dimension allows".
    """

    rank: int
    oversketch: int = 10
    mode: str = "one_pass"
    tolerance: float = 1e-14
    seed: int = 0
    rank_cap: Optional[int] = None

    def __post_init__(self):
        if int(self.rank) < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if int(self.oversketch) < 0:
            raise ConfigError(f"oversketch must be >= 0, got {self.oversketch}")
        if not self.tolerance > 0:
            raise ConfigError(f"tolerance must be positive, got {self.tolerance}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rank_cap is not None and int(self.rank_cap) < 1:
            raise ConfigError("rank_cap must be >= 1")

    @property
    def sketch_size(self) -> int:
        return int(self.rank) + int(self.oversketch)

    def cap_for(self, dim: int) -> int:
        """Largest admissible rank for an operator of dimension ``dim``."""
        room = max(1, dim - int(self.oversketch))
        return room if self.rank_cap is None else min(int(self.rank_cap), room)

    def with_rank(self, rank: int) -> "SketchConfig":
        return replace(self, rank=int(rank))


@dataclass(frozen=True)
class SketchedEig:
    """Retained top eigenpairs plus the remaining Ritz pairs above tolerance.

    ``U``/``eigvals`` are the top ``effective_rank`` pairs used to precondition.
    ``tail_U``/``tail_eigvals`` hold the other pairs that survived truncation;
    they only enter the sufficiency denominator.
    """

    U: np.ndarray
    eigvals: np.ndarray
    tail_U: np.ndarray
    tail_eigvals: np.ndarray
    tolerance: float
    sufficiency: float = float("nan")
    dim: int = field(default=0)

    @property
    def effective_rank(self) -> int:
        return int(self.eigvals.size)

    @property
    def estimated_rank(self) -> int:
        """Number of Ritz values above tolerance, retained or not."""
        return int(self.eigvals.size + self.tail_eigvals.size)

    @property
    def all_U(self) -> np.ndarray:
        return np.hstack([self.U, self.tail_U])

    @property
    def all_eigvals(self) -> np.ndarray:
        return np.concatenate([self.eigvals, self.tail_eigvals])

    def dense(self) -> np.ndarray:
        return (self.U * self.eigvals) @ self.U.T

    def with_sufficiency(self, value: float) -> "SketchedEig":
        return replace(self, sufficiency=float(value))

    @classmethod
    def from_pairs(cls, vals: np.ndarray, vecs: np.ndarray, rank: int, tolerance: float) -> "SketchedEig":
        """Sort, truncate at ``tolerance`` and split into retained/tail pairs."""
        order = np.argsort(-vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]
        above = vals > tolerance
        vals, vecs = vals[above], vecs[:, above]
        k = min(int(rank), vals.size)
        return cls(
            U=vecs[:, :k],
            eigvals=vals[:k],
            tail_U=vecs[:, k:],
            tail_eigvals=vals[k:],
            tolerance=float(tolerance),
            dim=vecs.shape[0],
        )

    @classmethod
    def from_dense(cls, M, rank: int, tolerance: float = 1e-12) -> "SketchedEig":
        """Exact decomposition of a dense symmetric matrix (tests and diagnostics)."""
        M = np.asarray(M, dtype=np.float64)
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
        return cls.from_pairs(vals, vecs, rank, tolerance)


def _orth(Y: np.ndarray) -> np.ndarray:
    """Orthonormal basis of range(Y), dropping numerically null directions."""
    if Y.size == 0:
        return Y[:, :0]
    Uy, sy, _ = np.linalg.svd(Y, full_matrices=False)
    if sy.size == 0 or sy[0] == 0.0:
        return Y[:, :0]
    keep = sy > max(Y.shape) * np.finfo(np.float64).eps * sy[0]
    return Uy[:, keep]


def _apply(matvec: Matvec, V: np.ndarray) -> np.ndarray:
    out = np.asarray(matvec(V), dtype=np.float64)
    if out.shape != V.shape:
        raise ValueError(f"matvec returned shape {out.shape} for input {V.shape}")
    if not np.all(np.isfinite(out)):
        raise NumericalError("matvec returned non-finite values")
    return out


def randomized_eig(
    matvec: Matvec,
    dim: int,
    cfg: SketchConfig,
    rng: Optional[np.random.Generator] = None,
) -> SketchedEig:
    """Sketch the top of a symmetric PSD (up to clipping) operator.

    ``rng`` supplies the Gaussian test matrix; by default a generator seeded
    from ``cfg.seed`` is used, so repeated calls draw the same probes.
    """
    size = cfg.sketch_size
    if size > dim:
        raise ConfigError(f"rank + oversketch = {size} exceeds dimension {dim}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    omega = rng.standard_normal((dim, size))
    Y = _apply(matvec, omega)
    Q = _orth(Y)
    if Q.shape[1] == 0:
        return SketchedEig.from_pairs(np.zeros(0), np.zeros((dim, 0)), cfg.rank, cfg.tolerance)

    if cfg.mode == "two_pass":
        B = Q.T @ _apply(matvec, Q)
    else:
        # B (Q^T Omega) = Q^T Y in least squares, solved through its transpose
        B = np.linalg.lstsq((Q.T @ omega).T, (Q.T @ Y).T, rcond=None)[0].T
    B = 0.5 * (B + B.T)
    theta, W = np.linalg.eigh(B)
    return SketchedEig.from_pairs(theta, Q @ W, cfg.rank, cfg.tolerance)


def precondition(decomp: SketchedEig, grad: np.ndarray) -> np.ndarray:
    """U diag(1/lambda) U^T grad. Raises EmptySketchError if nothing was retained."""
    if decomp.effective_rank == 0:
        raise EmptySketchError("sketch retained no eigenpairs; use the raw gradient")
    return decomp.U @ ((decomp.U.T @ grad) / decomp.eigvals)


def sufficiency(decomp: SketchedEig, grad: np.ndarray, matvec: Optional[Matvec] = None) -> float:
    """Ratio of the curvature captured by the rank-k step to the full-step curvature.

    The numerator is delta_k^T M delta_k, evaluated with one extra matvec when
    ``matvec`` is given and from the retained pairs otherwise. The denominator
    sums (u_i^T g)^2 / lambda_i over every pair above tolerance. When the
    gradient has no component in any retained direction both quantities vanish
    and the rank-k step equals the full step, so 1 is returned.
    """
    if decomp.effective_rank == 0 or not np.any(decomp.eigvals > 0):
        raise EmptySketchError("sufficiency is undefined for an empty decomposition")
    grad = np.asarray(grad, dtype=np.float64)
    coef_all = decomp.all_U.T @ grad
    denom = float(np.sum(coef_all**2 / decomp.all_eigvals))
    if matvec is None:
        coef = coef_all[: decomp.effective_rank]
        numer = float(np.sum(coef**2 / decomp.eigvals))
    else:
        delta = precondition(decomp, grad)
        numer = float(delta @ _apply(matvec, delta[:, None])[:, 0])
    if denom <= 0.0:
        return 1.0
    return numer / denom


def gated_rank_update(
    prev_rank: int,
    estimated_rank: int,
    sufficiency: float,
    cap: int,
    oversketch: int = 0,
) -> int:
    """Next sketch rank: estimate plus oversampling, frozen once the sketch is sufficient."""
    candidate = int(estimated_rank) + int(oversketch)
    if sufficiency >= 1.0:
        candidate = min(candidate, int(prev_rank))
    return max(1, min(candidate, int(cap)))
