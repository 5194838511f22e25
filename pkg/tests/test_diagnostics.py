import numpy as np
import pytest

from errwhiten.diagnostics import (
    AlignmentTable,
    alignment_pair,
    cosine,
    function_space_direction,
    ggn_hessian_agreement,
    reachability,
    snapshot,
)
from errwhiten.errors import DomainError
from errwhiten.linalg import pinv
from errwhiten.losses import hinge, q_power
from errwhiten.net import Batch, MlpSpec, ParamVector, forward, init_params, jacobian, linearize
from errwhiten.sketch import SketchConfig


def test_cosine_examples(rng):
    a = rng.standard_normal(6)
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine(a, -a) == pytest.approx(-1.0)
    assert cosine([1.0, 0.0], [0.0, 2.0]) == 0.0
    with pytest.raises(DomainError):
        cosine(np.zeros(3), a[:3])


def test_function_space_direction(rng):
    p = init_params(MlpSpec.mlp(3, 5, 2, 2, init_scale=1.3, seed=1))
    batch = Batch(rng.standard_normal((4, 3)))
    assert not function_space_direction(p, batch, np.zeros(len(p))).any()
    dt = rng.standard_normal(len(p))
    np.testing.assert_allclose(function_space_direction(p, batch, dt), jacobian(p, batch) @ dt, atol=1e-10)
    spec = MlpSpec((3, 2), activation="identity")
    lin = ParamVector(rng.standard_normal(spec.n_params), spec)
    np.testing.assert_allclose(
        function_space_direction(lin, batch, ParamVector(dt[: spec.n_params], spec)),
        jacobian(lin, batch) @ dt[: spec.n_params],
        atol=1e-14,
    )


def test_reachability_examples(rng):
    J = rng.standard_normal((8, 3))
    assert reachability(J, J @ rng.standard_normal(3)) == pytest.approx(1.0, abs=1e-8)
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    Jc = Q[:, :3] @ rng.standard_normal((3, 3))
    assert reachability(Jc, Q[:, 5]) == pytest.approx(0.0, abs=1e-10)
    J = rng.standard_normal((8, 5))
    v = rng.standard_normal(8)
    proj = J @ pinv(J) @ v
    expected = (proj @ proj) / (v @ v)
    assert reachability(J, v) == pytest.approx(expected, abs=1e-8)
    mf = (lambda x: J @ x, lambda u: J.T @ u, 5)
    assert reachability(mf, v) == pytest.approx(expected, abs=1e-8)
    with pytest.raises(DomainError):
        reachability(J, np.zeros(8))


def test_reachability_through_network_matvecs(rng):
    p = init_params(MlpSpec.mlp(3, 3, 1, 2, init_scale=1.3, seed=0))
    batch = Batch(2 * rng.standard_normal((40, 3)))
    lin = linearize(p, batch)
    J = lin.jacobian()
    s = np.linalg.svd(J, compute_uv=False)
    assert s[-1] / s[0] > 1e-4
    v = rng.standard_normal(80)
    dense = reachability(J, v)
    assert 0.0 <= dense <= 1.0
    assert reachability((lin.jvp, lin.vjp, lin.p), v) == pytest.approx(dense, abs=1e-6)


def _overparam(rng, d=6, k=1, seed=0):
    p = init_params(MlpSpec.mlp(2, 32, 2, k, init_scale=1.3, seed=seed))
    x = rng.uniform(-1, 1, (d, 2))
    return p, x


def test_squared_loss_snapshot(rng):
    p, x = _overparam(rng)
    batch = Batch(x, rng.standard_normal((6, 1)))
    table = snapshot(p, batch, q_power(2), sketch_cfg=SketchConfig(rank=40, oversketch=10, tolerance=1e-12))
    assert set(table.labels) == {"G_J", "G", "H", "muon", "grad_pushforward", "func_grad", "mismatch"}
    np.testing.assert_allclose(np.diag(table.cosines), 1.0)
    np.testing.assert_allclose(table.cosines, table.cosines.T)
    assert np.all(np.abs(table.cosines) <= 1.0)
    assert table.cos("G", "mismatch") >= 0.99
    assert table.cos("G", "G_J") == pytest.approx(1.0, abs=1e-8)
    recs = table.to_records()
    assert len(recs) == 49 and set(recs[0]) == {"source", "loss_level", "row", "col", "cosine"}


def test_quartic_overparameterized_alignment(rng):
    p, x = _overparam(rng, d=5, k=3, seed=2)
    batch = Batch(x, rng.standard_normal((5, 3)))
    table = snapshot(p, batch, q_power(4), ("G_J", "G"), SketchConfig(rank=40, oversketch=10, tolerance=1e-12))
    assert table.cos("G_J", "func_grad") >= 0.999
    assert table.cos("G", "mismatch") >= 0.999


def test_hinge_marks_g_absent(rng):
    p, x = _overparam(rng)
    batch = Batch(x, np.sign(rng.standard_normal((6, 1))))
    table = snapshot(p, batch, hinge(), ("G_J", "G"), SketchConfig(rank=20, oversketch=5))
    assert "G" in table.absent
    assert np.isnan(table.cos("G", "mismatch"))
    assert table.cos("G_J", "func_grad") >= 0.999


def test_alignment_pair_of_gradient_step(rng):
    p, x = _overparam(rng)
    batch = Batch(x, rng.standard_normal((6, 1)))
    lin = linearize(p, batch)
    m, f = alignment_pair(lin, q_power(2), batch.targets, -lin.grad(q_power(2), batch.targets))
    assert m == pytest.approx(f)
    assert 0 < m <= 1
    assert alignment_pair(lin, q_power(2), batch.targets, np.zeros(lin.p)) == (None, None)


def test_agreement_linear_network(rng):
    spec = MlpSpec((3, 2), activation="identity", seed=0)
    p = init_params(spec)
    batch = Batch(rng.standard_normal((10, 3)), rng.standard_normal((10, 2)))
    cfg = SketchConfig(rank=6, oversketch=2, tolerance=1e-12)
    assert ggn_hessian_agreement(p, batch, q_power(4), cfg) == pytest.approx(1.0, abs=1e-6)


def test_agreement_near_zero_residual(rng):
    p = init_params(MlpSpec.mlp(2, 8, 2, 1, init_scale=1.3, seed=3))
    x = rng.uniform(-1, 1, (30, 2))
    batch = Batch(x, forward(p, x) + 1e-7 * rng.standard_normal((30, 1)))
    # the tolerance keeps only eigenvalues well above the second-order term
    cfg = SketchConfig(rank=20, oversketch=10, tolerance=1e-6)
    assert ggn_hessian_agreement(p, batch, q_power(2), cfg) >= 0.95


def test_agreement_undefined_for_hinge(rng):
    p, x = _overparam(rng)
    batch = Batch(x, np.sign(rng.standard_normal((6, 1))))
    with pytest.raises(DomainError):
        ggn_hessian_agreement(p, batch, hinge(), SketchConfig(rank=5))


def test_alignment_table_lookup():
    t = AlignmentTable(("a", "b"), np.array([[1.0, 0.3], [0.3, 1.0]]), 0.1, "x")
    assert t.cos("b", "a") == 0.3
