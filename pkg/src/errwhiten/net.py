"""Fully connected networks with hand-written derivative passes.

The network maps a ``(d, m)`` input batch to ``(d, k)`` outputs. Hidden layers
apply the activation, the last layer is affine. All derivative products
accept either one vector or a block of column vectors, so a sketch can push
many probes through a single pass:

* ``jvp``   -- J v by forward tangent propagation
* ``vjp``   -- J^T u by backpropagation
* ``hvp``   -- full loss Hessian times v, forward-over-reverse (R-operator)

Stacked outputs are ordered sample-major, then output component, matching
``outputs.reshape(-1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CapacityError, ShapeError
from .losses import LossSpec

JACOBIAN_GUARD = 10**8
# above this many entries derivative products stay matrix-free
MATERIALIZE_LIMIT = 4 * 10**7
# cap on elements of one (probes, samples, width) tangent block
CHUNK_ELEMENTS = 10**6

ACTIVATIONS = ("swish", "identity")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(kind, z):
    if kind == "identity":
        return z
    return z * _sigmoid(z)


def _act_d1(kind, z):
    if kind == "identity":
        return np.ones_like(z)
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _act_d2(kind, z):
    if kind == "identity":
        return np.zeros_like(z)
    s = _sigmoid(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


@dataclass(frozen=True)
class LayerSlot:
    layer: int
    weight: slice
    weight_shape: tuple[int, int]
    bias: slice


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "swish"
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("need at least an input and an output width")
        if min(self.layer_widths) < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")

    @classmethod
    def mlp(cls, n_in: int, width: int, depth: int, n_out: int, **kw) -> "MlpSpec":
        """``depth`` hidden layers of size ``width``."""
        return cls((n_in,) + (width,) * depth + (n_out,), **kw)

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    @cached_property
    def layout(self) -> tuple[LayerSlot, ...]:
        slots, offset = [], 0
        for i, (n_in, n_out) in enumerate(zip(self.layer_widths[:-1], self.layer_widths[1:])):
            w = slice(offset, offset + n_in * n_out)
            offset = w.stop
            b = slice(offset, offset + n_out)
            offset = b.stop
            slots.append(LayerSlot(i, w, (n_out, n_in), b))
        return tuple(slots)

    @property
    def n_params(self) -> int:
        return self.layout[-1].bias.stop


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.spec.n_params,):
            raise ShapeError(f"expected {self.spec.n_params} parameters, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def layout(self) -> tuple[LayerSlot, ...]:
        return self.spec.layout

    def __len__(self) -> int:
        return self.values.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (self.values[s.weight].reshape(s.weight_shape), self.values[s.bias])
            for s in self.layout
        ]

    def replace(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.spec)

    def __add__(self, other) -> "ParamVector":
        return self.replace(self.values + _values(other))

    def __sub__(self, other) -> "ParamVector":
        return self.replace(self.values - _values(other))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        object.__setattr__(self, "inputs", x)
        if self.targets is not None:
            y = np.asarray(self.targets, dtype=np.float64)
            if y.ndim == 1:
                y = y[:, None]
            if y.shape[0] != x.shape[0]:
                raise ShapeError("inputs and targets have different sample counts")
            if np.isnan(y).any():
                raise ValueError("targets contain NaN")
            object.__setattr__(self, "targets", y)
        if x.shape[0] < 1 or np.isnan(x).any():
            raise ValueError("batch must be nonempty and NaN-free")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], None if self.targets is None else self.targets[idx])


def _values(v) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, ParamVector) else v, dtype=np.float64)


def init_params(spec: MlpSpec) -> ParamVector:
    """Orthogonal weights scaled by ``init_scale``, zero biases.

    Each weight comes from the QR factor of a seeded Gaussian matrix with the
    signs of R's diagonal folded into Q.
    """
    rng = np.random.default_rng(spec.seed)
    values = np.zeros(spec.n_params)
    for slot in spec.layout:
        n_out, n_in = slot.weight_shape
        a = rng.standard_normal((max(n_out, n_in), min(n_out, n_in)))
        q, r = np.linalg.qr(a)
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        w = q if n_out >= n_in else q.T
        values[slot.weight] = (spec.init_scale * w).reshape(-1)
    return ParamVector(values, spec)


class Linearization:
    """Forward pass cached at (params, inputs); derivative products reuse it."""

    def __init__(self, params: ParamVector, inputs: np.ndarray):
        spec = params.spec
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if x.shape[1] != spec.n_inputs:
            raise ShapeError(f"inputs have {x.shape[1]} features, network expects {spec.n_inputs}")
        self.params = params
        self.spec = spec
        self.act = spec.activation
        self.layers = params.layers()
        self.acts = [x]  # input to each layer
        self.pre = []  # pre-activations of hidden layers
        a = x
        for w, b in self.layers[:-1]:
            z = a @ w.T + b
            self.pre.append(z)
            a = _act(self.act, z)
            self.acts.append(a)
        w, b = self.layers[-1]
        self.outputs = a @ w.T + b
        self.d = x.shape[0]
        self.k = spec.n_outputs
        self.p = spec.n_params
        self._d1 = [_act_d1(self.act, z) for z in self.pre]
        self._d2 = None
        self._J = None

    @property
    def dense(self) -> np.ndarray | None:
        """Per-sample Jacobian when small enough to hold, else None."""
        if self._J is None and self.d * self.k * self.p <= MATERIALIZE_LIMIT:
            self._J = self._per_sample_jacobian()
        return self._J

    def _second_derivs(self) -> list[np.ndarray]:
        if self._d2 is None:
            self._d2 = [_act_d2(self.act, z) for z in self.pre]
        return self._d2

    def _per_sample_jacobian(self) -> np.ndarray:
        J = np.empty((self.d, self.k, self.p))
        for j in range(self.k):
            delta = np.zeros((self.d, self.k))
            delta[:, j] = 1.0
            for i in range(len(self.layers) - 1, -1, -1):
                slot = self.spec.layout[i]
                J[:, j, slot.weight] = (delta[:, :, None] * self.acts[i][:, None, :]).reshape(self.d, -1)
                J[:, j, slot.bias] = delta
                if i > 0:
                    delta = (delta @ self.layers[i][0]) * self._d1[i - 1]
        return J.reshape(self.d * self.k, self.p)

    # -- helpers -----------------------------------------------------------

    def _chunk(self, n_probes: int, factor: int = 1) -> int:
        width = max(self.spec.layer_widths)
        per_probe = self.d * width * factor
        return max(1, min(n_probes, CHUNK_ELEMENTS // max(per_probe, 1)))

    def _split(self, vt: np.ndarray):
        """vt: (s, p) -> per-layer (dW (s, out, in), db (s, out))."""
        s = vt.shape[0]
        return [
            (vt[:, sl.weight].reshape((s,) + sl.weight_shape), vt[:, sl.bias])
            for sl in self.spec.layout
        ]

    def _tangents(self, vt: np.ndarray):
        """Forward tangents in (d, s, width) layout.

        Returns the output tangent and per-hidden-layer lists of pre-activation
        and activation tangents (``das[i]`` is the tangent of layer i's input).
        """
        d, s = self.d, vt.shape[0]
        da = None
        dzs, das = [], [None]
        for i, ((w, _), (dw, db)) in enumerate(zip(self.layers, self._split(vt))):
            n_out, n_in = w.shape
            dz = (self.acts[i] @ dw.reshape(s * n_out, n_in).T).reshape(d, s, n_out)
            dz += db
            if da is not None:
                dz += (da.reshape(d * s, n_in) @ w.T).reshape(d, s, n_out)
            if i == len(self.layers) - 1:
                return dz, dzs, das
            dzs.append(dz)
            da = dz * self._d1[i][:, None, :]
            das.append(da)

    def _weight_cotangent(self, i: int, delta: np.ndarray) -> np.ndarray:
        """sum over samples of delta (d, s, out) x acts[i] (d, in) -> (s, out*in)."""
        d, s, n_out = delta.shape
        return (delta.reshape(d, s * n_out).T @ self.acts[i]).reshape(s, -1)

    def _backprop(self, delta: np.ndarray) -> np.ndarray:
        """delta: (d, s, k) output cotangents -> (s, p) parameter cotangents."""
        d, s = delta.shape[:2]
        out = np.empty((s, self.p))
        for i in range(len(self.layers) - 1, -1, -1):
            slot = self.spec.layout[i]
            w, _ = self.layers[i]
            out[:, slot.weight] = self._weight_cotangent(i, delta)
            out[:, slot.bias] = delta.sum(axis=0)
            if i > 0:
                n_out, n_in = w.shape
                delta = (delta.reshape(d * s, n_out) @ w).reshape(d, s, n_in)
                delta *= self._d1[i - 1][:, None, :]
        return out

    @staticmethod
    def _as_block(v, n: int) -> tuple[np.ndarray, bool]:
        v = _values(v)
        single = v.ndim == 1
        block = v[:, None] if single else v
        if block.shape[0] != n:
            raise ShapeError(f"expected leading dimension {n}, got {block.shape[0]}")
        return block, single

    # -- products ----------------------------------------------------------

    def jvp(self, v) -> np.ndarray:
        block, single = self._as_block(v, self.p)
        if self.dense is not None:
            out = self.dense @ block
            return out[:, 0] if single else out
        vt = np.ascontiguousarray(block.T)
        out = np.empty((self.d * self.k, vt.shape[0]))
        step = self._chunk(vt.shape[0])
        for lo in range(0, vt.shape[0], step):
            dz, _, _ = self._tangents(vt[lo : lo + step])
            out[:, lo : lo + step] = dz.transpose(0, 2, 1).reshape(self.d * self.k, -1)
        return out[:, 0] if single else out

    def vjp(self, u) -> np.ndarray:
        block, single = self._as_block(u, self.d * self.k)
        if self.dense is not None:
            out = self.dense.T @ block
            return out[:, 0] if single else out
        ut = np.ascontiguousarray(block.T)
        out = np.empty((self.p, ut.shape[0]))
        step = self._chunk(ut.shape[0])
        for lo in range(0, ut.shape[0], step):
            delta = ut[lo : lo + step].reshape(-1, self.d, self.k).transpose(1, 0, 2)
            out[:, lo : lo + step] = self._backprop(np.ascontiguousarray(delta)).T
        return out[:, 0] if single else out

    def curvature_matvec(self, v, weight=None) -> np.ndarray:
        """(1/d) J^T W J v with W the per-sample loss Hessian, or identity if None."""
        block, single = self._as_block(v, self.p)
        if self.dense is not None:
            u = self.dense @ block
            if weight is not None:
                s = block.shape[1]
                u = weight(u.T.reshape(s, self.d, self.k)).reshape(s, -1).T
            out = self.dense.T @ u / self.d
            return out[:, 0] if single else out
        vt = np.ascontiguousarray(block.T)
        out = np.empty((self.p, vt.shape[0]))
        step = self._chunk(vt.shape[0])
        for lo in range(0, vt.shape[0], step):
            dz, _, _ = self._tangents(vt[lo : lo + step])
            if weight is not None:
                dz = np.ascontiguousarray(weight(dz.transpose(1, 0, 2)).transpose(1, 0, 2))
            out[:, lo : lo + step] = self._backprop(dz).T / self.d
        return out[:, 0] if single else out

    def gj_matvec(self, v) -> np.ndarray:
        return self.curvature_matvec(v)

    def ggn_matvec(self, loss: LossSpec, targets, v) -> np.ndarray:
        f, y = self.outputs, _targets(targets, self.outputs)
        return self.curvature_matvec(v, weight=lambda u: loss.hess_matvec(f, y, u))

    def grad(self, loss: LossSpec, targets) -> np.ndarray:
        y = _targets(targets, self.outputs)
        return self.vjp((loss.sample_grads(self.outputs, y) / self.d).reshape(-1))

    def hvp(self, loss: LossSpec, targets, v) -> np.ndarray:
        """Full Hessian of the mean loss times v (Pearlmutter's R-operator)."""
        f, y = self.outputs, _targets(targets, self.outputs)
        loss.check_twice_differentiable(f, y)
        g_out = loss.sample_grads(f, y) / self.d
        block, single = self._as_block(v, self.p)
        vt = np.ascontiguousarray(block.T)
        out = np.empty((self.p, vt.shape[0]))
        n_layers = len(self.layers)
        step = self._chunk(vt.shape[0], factor=2)
        for lo in range(0, vt.shape[0], step):
            chunk = vt[lo : lo + step]
            s = chunk.shape[0]
            dparams = self._split(chunk)
            dz_out, dzs, das = self._tangents(chunk)
            r_delta = loss.hess_matvec(f, y, dz_out.transpose(1, 0, 2)).transpose(1, 0, 2) / self.d
            r_delta = np.ascontiguousarray(r_delta)
            delta = g_out
            d = self.d
            res = np.empty((s, self.p))
            for i in range(n_layers - 1, -1, -1):
                slot = self.spec.layout[i]
                w, _ = self.layers[i]
                n_out, n_in = w.shape
                gw = self._weight_cotangent(i, r_delta)
                if das[i] is not None:
                    extra = (delta.T @ das[i].reshape(d, s * n_in)).reshape(n_out, s, n_in)
                    gw += extra.transpose(1, 0, 2).reshape(s, -1)
                res[:, slot.weight] = gw
                res[:, slot.bias] = r_delta.sum(axis=0)
                if i > 0:
                    back = delta @ w
                    dw = dparams[i][0].transpose(1, 0, 2).reshape(n_out, s * n_in)
                    r_back = (r_delta.reshape(d * s, n_out) @ w).reshape(d, s, n_in)
                    r_back += (delta @ dw).reshape(d, s, n_in)
                    d2 = self._second_derivs()[i - 1]
                    r_delta = r_back * self._d1[i - 1][:, None, :]
                    r_delta += (back * d2)[:, None, :] * dzs[i - 1]
                    delta = back * self._d1[i - 1]
            out[:, lo : lo + step] = res.T
        return out[:, 0] if single else out

    def jacobian(self) -> np.ndarray:
        rows = self.d * self.k
        if rows * self.p > JACOBIAN_GUARD:
            raise CapacityError(f"Jacobian {rows}x{self.p} exceeds {JACOBIAN_GUARD} entries")
        if self.dense is not None:
            return self.dense.copy()
        if rows <= self.p:
            return self.vjp(np.eye(rows)).T
        return self.jvp(np.eye(self.p))


def _targets(targets, outputs) -> np.ndarray:
    if isinstance(targets, Batch):
        targets = targets.targets
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != outputs.shape:
        raise ShapeError(f"targets {y.shape} do not match outputs {outputs.shape}")
    return y


def linearize(params: ParamVector, batch: Batch | np.ndarray) -> Linearization:
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    return Linearization(params, inputs)


def forward(params: ParamVector, batch: Batch | np.ndarray) -> np.ndarray:
    inputs = batch.inputs if isinstance(batch, Batch) else np.atleast_2d(batch)
    if inputs.shape[1] != params.spec.n_inputs:
        raise ShapeError(f"inputs have {inputs.shape[1]} features, network expects {params.spec.n_inputs}")
    a = inputs
    layers = params.layers()
    for w, b in layers[:-1]:
        a = _act(params.spec.activation, a @ w.T + b)
    w, b = layers[-1]
    return a @ w.T + b


def jacobian(params: ParamVector, batch: Batch) -> np.ndarray:
    return linearize(params, batch).jacobian()


def jvp(params: ParamVector, batch: Batch, v) -> np.ndarray:
    return linearize(params, batch).jvp(v)


def vjp(params: ParamVector, batch: Batch, u) -> np.ndarray:
    return linearize(params, batch).vjp(u)


def loss_grad(params: ParamVector, batch: Batch, loss: LossSpec) -> np.ndarray:
    return linearize(params, batch).grad(loss, batch.targets)


def loss_hvp(params: ParamVector, batch: Batch, loss: LossSpec, v) -> np.ndarray:
    return linearize(params, batch).hvp(loss, batch.targets, v)


def ggn_matvec(params: ParamVector, batch: Batch, loss: LossSpec, v) -> np.ndarray:
    return linearize(params, batch).ggn_matvec(loss, batch.targets, v)


def gj_matvec(params: ParamVector, batch: Batch, v) -> np.ndarray:
    return linearize(params, batch).gj_matvec(v)
