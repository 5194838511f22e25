"""Function-space views of parameter updates.

Every update direction is pushed forward through the Jacobian and compared
with two references: the negative mismatch and the negative function-space
loss gradient. Both references are taken with a minus sign so that a
direction that decreases the loss points the same way as they do.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, lsqr

from .errors import DomainError
from .linalg import orthogonal_projector
from .losses import LossSpec, func_grad, mismatch
from .net import Batch, Linearization, ParamVector, linearize
from .optimizers import MATRICES, MuonState, muon_init, muon_step, sketched_direction
from .sketch import SketchConfig

REFERENCE_ROWS = ("grad_pushforward", "func_grad", "mismatch")


def function_space_direction(params: ParamVector, batch: Batch, dtheta) -> np.ndarray:
    """J dtheta, stacked sample-major."""
    dtheta = dtheta.values if isinstance(dtheta, ParamVector) else dtheta
    return linearize(params, batch).jvp(np.asarray(dtheta, dtype=np.float64))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine is undefined for a zero vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def reachability(J, v, *, tol: float = 1e-12, atol: float = 1e-12, iter_lim: Optional[int] = None) -> float:
    """||J J^+ v||^2 / ||v||^2.

    ``J`` is either a dense matrix or a ``(jvp, vjp, n_cols)`` triple; the
    latter goes through an LSQR least-squares solve.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    vv = float(v @ v)
    if vv == 0.0:
        raise DomainError("reachability is undefined for the zero vector")
    if isinstance(J, tuple):
        jvp, vjp, n = J
        op = LinearOperator((v.size, n), matvec=jvp, rmatvec=vjp, dtype=np.float64)
        x = lsqr(op, v, atol=atol, btol=atol, conlim=1.0 / tol, iter_lim=iter_lim or 10 * n)[0]
        proj = jvp(x)
    else:
        proj = orthogonal_projector(np.asarray(J, dtype=np.float64), tol) @ v
    return float(np.clip((proj @ proj) / vv, 0.0, 1.0))


def reference_directions(lin: Linearization, loss: LossSpec, targets) -> dict[str, np.ndarray]:
    grad = lin.grad(loss, targets)
    return {
        "grad_pushforward": -lin.jvp(grad),
        "func_grad": -func_grad(loss, lin.outputs, targets),
        "mismatch": -mismatch(loss, lin.outputs, targets),
    }


def alignment_pair(lin: Linearization, loss: LossSpec, targets, dtheta) -> tuple[Optional[float], Optional[float]]:
    """(cos to -mismatch, cos to -func_grad) of the update's function-space image."""
    out = lin.jvp(np.asarray(dtheta, dtype=np.float64))
    refs = reference_directions(lin, loss, targets)
    vals = []
    for key in ("mismatch", "func_grad"):
        try:
            vals.append(cosine(out, refs[key]))
        except DomainError:
            vals.append(None)
    return vals[0], vals[1]


@dataclass(frozen=True)
class AlignmentTable:
    labels: tuple[str, ...]
    cosines: np.ndarray
    loss_level: float
    source: str = ""
    absent: tuple[str, ...] = field(default=())

    def cos(self, a: str, b: str) -> float:
        return float(self.cosines[self.labels.index(a), self.labels.index(b)])

    def to_records(self) -> list[dict]:
        rows = []
        for i, a in enumerate(self.labels):
            for j, b in enumerate(self.labels):
                rows.append(
                    {
                        "source": self.source,
                        "loss_level": self.loss_level,
                        "row": a,
                        "col": b,
                        "cosine": float(self.cosines[i, j]),
                    }
                )
        return rows


def _sketch_rng(cfg: SketchConfig) -> np.random.Generator:
    return np.random.default_rng(cfg.seed)


def optimizer_directions(
    params: ParamVector,
    batch: Batch,
    loss: LossSpec,
    optimizers: Sequence[str],
    sketch_cfg: SketchConfig,
    muon_state: Optional[MuonState] = None,
    lin: Optional[Linearization] = None,
) -> dict[str, Optional[np.ndarray]]:
    """Parameter-space update direction per optimizer (None when undefined)."""
    lin = linearize(params, batch) if lin is None else lin
    cfg = sketch_cfg.with_rank(min(sketch_cfg.rank, sketch_cfg.cap_for(lin.p)))
    out: dict[str, Optional[np.ndarray]] = {}
    for name in optimizers:
        if name in MATRICES:
            if name == "G" and not loss.has_curvature:
                out[name] = None
                continue
            # identical probes for every matrix so only the matrix choice differs
            out[name] = sketched_direction(lin, loss, batch.targets, name, cfg, _sketch_rng(cfg)).direction
        elif name == "muon":
            state = muon_init(params) if muon_state is None else muon_state
            _, moved = muon_step(state, params, lin.grad(loss, batch.targets))
            out[name] = moved.values - params.values
        elif name in ("gd", "adam"):
            out[name] = -lin.grad(loss, batch.targets)
        else:
            raise ValueError(f"unknown optimizer {name!r}")
    return out


def snapshot(
    params: ParamVector,
    batch: Batch,
    loss: LossSpec,
    optimizers: Sequence[str] = ("G_J", "G", "H", "muon"),
    sketch_cfg: Optional[SketchConfig] = None,
    *,
    muon_state: Optional[MuonState] = None,
    source: str = "",
) -> AlignmentTable:
    """Pairwise cosines between optimizer images and the reference directions."""
    sketch_cfg = SketchConfig(rank=75, oversketch=10) if sketch_cfg is None else sketch_cfg
    lin = linearize(params, batch)
    dirs = optimizer_directions(params, batch, loss, optimizers, sketch_cfg, muon_state, lin)
    vecs: dict[str, Optional[np.ndarray]] = {
        k: None if d is None else lin.jvp(d) for k, d in dirs.items()
    }
    vecs.update(reference_directions(lin, loss, batch.targets))
    labels = tuple(vecs)
    absent = tuple(k for k, v in vecs.items() if v is None or not np.any(v))
    n = len(labels)
    C = np.full((n, n), np.nan)
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            if a in absent or b in absent:
                continue
            C[i, j] = 1.0 if i == j else cosine(vecs[a], vecs[b])
    C = 0.5 * (C + C.T)
    level = float(loss.per_sample(lin.outputs, batch.targets).mean())
    return AlignmentTable(labels, C, level, source, absent)


def ggn_hessian_agreement(
    params: ParamVector, batch: Batch, loss: LossSpec, sketch_cfg: SketchConfig
) -> float:
    """Cosine between the sketched G and sketched H parameter directions."""
    dirs = optimizer_directions(params, batch, loss, ("G", "H"), sketch_cfg)
    if dirs["G"] is None:
        raise DomainError(f"G is undefined for the {loss.kind} loss")
    return cosine(dirs["G"], dirs["H"])
