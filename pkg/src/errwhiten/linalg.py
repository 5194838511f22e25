"""Dense small-matrix kernels: SVD, pseudoinverse and projectors.

These are the exact-decomposition references used by the diagnostics and as
test oracles for the sketched eigensolver. Sizes are small (a few hundred on
a side at most), so accuracy is preferred over speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DecompositionError, DomainError

DEFAULT_TOL = 1e-12
MAX_JACOBI_SIDE = 512
MAX_SWEEPS = 80


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.V.T


def _as_matrix(M) -> np.ndarray:
    M = np.array(M, dtype=np.float64, copy=True)
    if M.ndim != 2 or min(M.shape) < 1:
        raise ValueError(f"expected a non-empty 2-d matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint column pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.array(left, dtype=int), np.array(right, dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(Q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of Q not in ``keep`` by an orthonormal completion."""
    m, n = Q.shape
    basis = [Q[:, j] for j in range(n) if keep[j]]
    out = Q.copy()
    candidates = iter(np.eye(m))
    for j in range(n):
        if keep[j]:
            continue
        while True:
            e = next(candidates)
            for _ in range(2):
                for b in basis:
                    e = e - (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-6:
                e = e / norm
                break
        basis.append(e)
        out[:, j] = e
    return out


def svd(M, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Column pairs are rotated in round-robin order so that each round is a set
    of disjoint pairs and can be applied in one vectorized update.
    """
    A = _as_matrix(M)
    transposed = A.shape[0] < A.shape[1]
    if transposed:
        A = A.T
    m, n = A.shape
    if n > MAX_JACOBI_SIDE:
        raise ValueError(f"dense SVD limited to {MAX_JACOBI_SIDE} columns, got {n}")

    V = np.eye(n)
    rounds = _round_robin(n) if n > 1 else []
    eps = np.finfo(np.float64).eps
    for _ in range(max_sweeps):
        rotated = False
        for i, j in rounds:
            ai, aj = A[:, i], A[:, j]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            active = np.abs(gamma) > eps * np.sqrt(alpha * beta)
            active &= gamma != 0.0
            if not np.any(active):
                continue
            rotated = True
            i, j = i[active], j[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ai, aj = A[:, i].copy(), A[:, j].copy()
            A[:, i] = c * ai - s * aj
            A[:, j] = s * ai + c * aj
            vi, vj = V[:, i].copy(), V[:, j].copy()
            V[:, i] = c * vi - s * vj
            V[:, j] = s * vi + c * vj
        if not rotated:
            break
    else:
        raise DecompositionError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.linalg.norm(A, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, A, V = sigma[order], A[:, order], V[:, order]
    floor = max(m, n) * eps * (sigma[0] if sigma.size else 0.0)
    keep = sigma > floor
    U = np.zeros_like(A)
    U[:, keep] = A[:, keep] / sigma[keep]
    if not np.all(keep):
        U = _complete_basis(U, keep)
        sigma = np.where(keep, sigma, 0.0)
    if transposed:
        return SvdResult(U=V, singular_values=sigma, V=U)
    return SvdResult(U=U, singular_values=sigma, V=V)


def _cutoff(sigma: np.ndarray, tol: float) -> np.ndarray:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    if sigma.size == 0 or sigma[0] == 0.0:
        return np.zeros_like(sigma, dtype=bool)
    return sigma > tol * sigma[0]


def rank(M, tol: float = DEFAULT_TOL) -> int:
    return int(_cutoff(svd(M).singular_values, tol).sum())


def pinv(M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse; singular values at or below ``tol * sigma_max`` are dropped."""
    res = svd(M)
    keep = _cutoff(res.singular_values, tol)
    return (res.V[:, keep] / res.singular_values[keep]) @ res.U[:, keep].T


def orthogonal_projector(M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Euclidean projector M M^+ onto the column space of M, built as U_r U_r^T."""
    res = svd(M)
    Ur = res.U[:, _cutoff(res.singular_values, tol)]
    return Ur @ Ur.T


def _spd_sqrt(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DomainError("weight matrix must be square")
    if not np.allclose(W, W.T, rtol=1e-12, atol=1e-12 * np.abs(W).max()):
        raise DomainError("weight matrix must be symmetric")
    lam, Q = np.linalg.eigh(0.5 * (W + W.T))
    if lam[0] <= 0.0:
        raise DomainError(f"weight matrix is not positive definite (min eigenvalue {lam[0]:.3e})")
    root = np.sqrt(lam)
    return (Q * root) @ Q.T, (Q / root) @ Q.T


def weighted_projector(J, W, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Projector onto Im(J) that is orthogonal in the W inner product.

    Equals J (J^T W J)^+ J^T W, evaluated as W^{-1/2} A A^+ W^{1/2} with
    A = W^{1/2} J for numerical symmetry.
    """
    J = _as_matrix(J)
    W = _as_matrix(W)
    if W.shape[0] != J.shape[0]:
        raise ValueError(f"W is {W.shape} but J has {J.shape[0]} rows")
    if np.array_equal(W, np.eye(W.shape[0])):
        return orthogonal_projector(J, tol)
    root, inv_root = _spd_sqrt(W)
    return inv_root @ orthogonal_projector(root @ J, tol) @ root
