import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_fd_close, central_fd
from modedecomp import coupling as cpl
from modedecomp import deeponet as dn
from modedecomp.errors import ShapeError


def test_single_mode_has_no_interaction():
    rep = cpl.coupling_matrix([[1.0, 2.0]], [[1.0, 2.0]], [3.0], 0.1, 4, 5)
    assert rep.omega == 0.0 and rep.gamma == 0.0
    assert rep.d == pytest.approx(-0.1 / 400 * 81 * 5)


def test_equal_gradients_give_half():
    g = np.array([[1.0, -2.0, 0.5], [1.0, -2.0, 0.5]])
    rep = cpl.coupling_matrix(g, g, [1.0, 1.0], 1e-3, 3, 2)
    assert rep.gamma == pytest.approx(0.5, rel=1e-14)


def test_orthogonal_gradients_decouple():
    g = np.eye(3)
    rep = cpl.coupling_matrix(g, g, [3.0, 2.0, 1.0], 1e-2, 5, 5)
    assert rep.omega == 0.0 and rep.gamma == 0.0
    assert np.all(np.diag(rep.s) < 0)


def test_undefined_gamma_for_zero_gradient():
    rep = cpl.coupling_matrix(np.zeros((2, 3)), np.zeros((2, 3)), [1.0, 1.0], 1e-3, 3, 2)
    assert rep.gamma is None


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        cpl.coupling_matrix(np.ones((2, 3)), np.ones((2, 3)), [1.0], 1e-3, 3, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_sum_identity_and_sign_property(n_modes, dim, seed):
    gen = np.random.default_rng(seed)
    g = gen.standard_normal((n_modes, dim))
    sig = np.sort(gen.uniform(0.1, 5.0, n_modes))[::-1]
    rep = cpl.coupling_matrix(g, g, sig, 1e-3, 7, 9)
    assert abs(np.sum(rep.s) - (rep.d + rep.omega)) <= 1e-12 * max(1.0, np.abs(rep.s).sum())
    assert rep.d <= 0.0
    np.testing.assert_allclose(rep.s, rep.s.T, rtol=1e-14, atol=0)
    # total is -alpha ||grad L||^2 of the weighted loss
    full = (sig**2) @ g / (7 * 9)
    assert rep.total == pytest.approx(-1e-3 * float(full @ full), rel=1e-10, abs=1e-300)


def test_per_mode_gradients_finite_difference(small_kdv):
    tr, te = small_kdv
    model = dn.build_model("svd_scaled", tr, 3, 4, 2, np.random.default_rng(8))
    grads = cpl.per_mode_gradients(model, tr)
    arrays = model.arrays()
    shapes = [a.shape for a in arrays]
    theta0 = np.concatenate([a.ravel() for a in arrays])

    def unflat(theta):
        out, pos = [], 0
        for s in shapes:
            k = int(np.prod(s))
            out.append(theta[pos : pos + k].reshape(s))
            pos += k
        return out

    for i in range(3):
        def mode_loss(theta, i=i):
            bt, _ = dn.branch_forward(model.with_arrays(unflat(theta)).branch, tr.p_hat)
            return float(np.sum((bt[i] - model.v1[:, i]) ** 2))

        assert_fd_close(grads[i], central_fd(mode_loss, theta0), rtol=1e-6, floor=1e-9)
    test_grads = cpl.per_mode_gradients(model, te, "test", m_tr=tr.a.shape[1])
    assert test_grads.shape == grads.shape
    with pytest.raises(ValueError):
        cpl.per_mode_gradients(model, te, "test")
    with pytest.raises(ValueError):
        cpl.per_mode_gradients(dn.build_model("legendre", tr, 3, 4, 2, np.random.default_rng(0)), tr)


def test_taylor_step_quadratic():
    a = np.diag([1.0, 3.0, 0.5])
    loss = lambda th: 0.5 * th @ a @ th
    grad = lambda th: a @ th
    theta = np.array([1.0, -1.0, 2.0])
    zero = cpl.taylor_step(loss, grad, theta, 0.0)
    assert zero.predicted == 0.0 and zero.measured == 0.0 and zero.rel_gap == 0.0
    gaps = [cpl.taylor_step(loss, grad, theta, alpha).rel_gap for alpha in (1e-2, 5e-3, 2.5e-3)]
    # the gap is first order in alpha: halving alpha halves it
    orders = np.log2(np.array(gaps[:-1]) / np.array(gaps[1:]))
    assert np.all(orders >= 0.9)
    # absolute error of the prediction is second order
    errs = [abs(r.predicted - r.measured) for r in
            (cpl.taylor_step(loss, grad, theta, alpha) for alpha in (1e-2, 5e-3, 2.5e-3))]
    assert np.all(np.log2(np.array(errs[:-1]) / np.array(errs[1:])) >= 1.9)


def test_taylor_check_on_model(small_kdv):
    tr, _ = small_kdv
    model = dn.build_model("svd_scaled", tr, 4, 6, 2, np.random.default_rng(1))
    before = [a.copy() for a in model.arrays()]
    res, rep = cpl.taylor_check(model, tr, 1e-5)
    assert res.rel_gap < 0.1
    assert rep.d <= 0
    for a, b in zip(before, model.arrays()):
        np.testing.assert_array_equal(a, b)


def test_recorder_and_csv_round_trip(tmp_path, small_kdv):
    from modedecomp.optim import OptimizerConfig

    tr, te = small_kdv
    model = dn.build_model("svd_scaled", tr, 3, 4, 1, np.random.default_rng(0))
    rec = cpl.CouplingRecorder(tr, every=2)
    _, hist = dn.train(model, tr, te, OptimizerConfig("GD", 1e-4), epochs=5, observer=rec)
    reports = rec.fill_measured(hist)
    assert [r.epoch for r in reports] == [0, 2, 4]
    assert all(r.measured_dl is not None for r in reports)
    reports.append(cpl.CouplingReport(np.zeros((3, 3)), 0.0, 0.0, None, 1e-4, 6))
    cpl.write_coupling_csv(tmp_path / "c.csv", reports)
    assert "undefined" in (tmp_path / "c.csv").read_text()
    rows = cpl.read_coupling_csv(tmp_path / "c.csv")
    assert rows[-1]["gamma"] is None and rows[-1]["measured_dl"] is None
    assert rows[0]["d"] == reports[0].d and rows[1]["gamma"] == reports[1].gamma
    path = cpl.write_s_matrix(tmp_path, reports[1])
    assert path.endswith("S_epoch2.csv")
    np.testing.assert_array_equal(cpl.read_s_matrix(path), reports[1].s)
    assert cpl.mean_neg_gamma(reports) == pytest.approx(-np.mean([r.gamma for r in reports[:3]]))
    assert np.isnan(cpl.mean_neg_gamma([]))
    with pytest.raises(ValueError):
        cpl.CouplingRecorder(tr, every=0)
