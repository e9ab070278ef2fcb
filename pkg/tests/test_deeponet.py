import numpy as np
import pytest
from numpy.polynomial import chebyshev as npcheb
from numpy.polynomial import legendre as npleg

from conftest import assert_fd_close, central_fd
from modedecomp import deeponet as dn
from modedecomp import errdecomp as ed
from modedecomp import nn
from modedecomp.errors import ShapeError
from modedecomp.linalg import svd, truncate
from modedecomp.optim import OptimizerConfig


def grid(n=11):
    return np.linspace(0.0, 1.0, n)


def test_fixed_basis_examples():
    x = grid()
    np.testing.assert_array_equal(dn.trunk_matrix("legendre", x, None, 3)[:, 0], 1.0)
    np.testing.assert_array_equal(dn.trunk_matrix("cosine", x, None, 3)[:, 0], 1.0)
    cheb = dn.trunk_matrix("chebyshev", np.array([0.75]), None, 3)
    assert cheb[0, 2] == pytest.approx(-0.5, abs=1e-15)


@pytest.mark.parametrize("kind,oracle", [("legendre", npleg.legvander), ("chebyshev", npcheb.chebvander)])
def test_polynomial_bases_against_numpy(kind, oracle):
    x = np.linspace(0.0, 1.0, 41)
    np.testing.assert_allclose(dn.trunk_matrix(kind, x, None, 30), oracle(2 * x - 1, 29), atol=1e-11)


def test_cosine_basis():
    x = grid()
    np.testing.assert_allclose(dn.trunk_matrix("cosine", x, None, 4), np.cos(np.pi * np.outer(x, np.arange(4))),
                               atol=1e-15)


def test_svd_trunks_and_errors(rng):
    a = rng.standard_normal((11, 9))
    split = truncate(svd(a), 4)
    np.testing.assert_allclose(dn.trunk_matrix("svd_scaled", grid(), split, 3), split.phi1[:, :3] * split.sigma1[:3])
    np.testing.assert_array_equal(dn.trunk_matrix("svd_unscaled", grid(), split, 2), split.phi1[:, :2])
    with pytest.raises(ValueError):
        dn.trunk_matrix("svd_scaled", grid(), split, 5)
    with pytest.raises(ValueError):
        dn.trunk_matrix("svd_scaled", grid(), None, 2)
    with pytest.raises(ValueError):
        dn.trunk_matrix("legendre", np.array([-0.5, 0.5]), None, 2)
    with pytest.raises(ValueError):
        dn.trunk_matrix("fourier", grid(), None, 2)


def test_build_model_rejects_large_n(small_kdv):
    tr, _ = small_kdv
    with pytest.raises(ValueError):
        dn.build_model("svd_scaled", tr, 40, 4, 1, np.random.default_rng(0))


def test_predict_examples(small_kdv, rng):
    tr, _ = small_kdv
    model = dn.build_model("svd_scaled", tr, 5, 6, 2, rng)
    zero = model.with_arrays([np.zeros_like(a) for a in model.arrays()])
    assert np.all(dn.predict(zero, tr.p_hat) == 0)
    full = dn.predict(model, tr.p_hat)
    np.testing.assert_allclose(dn.predict(model, tr.p_hat[:, 3]), full[:, 3], rtol=1e-12, atol=1e-14)
    # the optimal coefficients reproduce the best rank-N approximation
    best = dn.trunk(model) @ model.v1.T
    split = truncate(svd(tr.a), 5)
    np.testing.assert_allclose(best, (split.phi1 * split.sigma1) @ split.v1.T, atol=1e-9)
    with pytest.raises(ShapeError):
        dn.predict(model, np.ones((3, 2)))


def test_stacked_embeds_in_unstacked(rng):
    n_out, width, depth, m_in = 3, 4, 3, 5
    stacked = dn.make_branch(m_in, width, depth, n_out, True, rng)
    big = n_out * width
    arrays = []
    nets = stacked.nets
    arrays.append(np.vstack([net.weights[0] for net in nets]))
    arrays.append(np.concatenate([net.biases[0] for net in nets]))
    for layer in range(1, depth):
        w = np.zeros((big, big))
        for i, net in enumerate(nets):
            w[i * width : (i + 1) * width, i * width : (i + 1) * width] = net.weights[layer]
        arrays += [w, np.concatenate([net.biases[layer] for net in nets])]
    w_out = np.zeros((n_out, big))
    for i, net in enumerate(nets):
        w_out[i, i * width : (i + 1) * width] = net.w_out[0]
    arrays.append(w_out)
    unstacked = dn.Branch((nn.MlpParams.from_arrays(nn.MlpShape(m_in, big, depth, n_out), arrays),), False)
    x = rng.standard_normal((m_in, 7))
    np.testing.assert_allclose(dn.branch_forward(unstacked, x)[0], dn.branch_forward(stacked, x)[0],
                               rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("kind,stacked", [("svd_scaled", False), ("svd_scaled", True), ("learned", False),
                                          ("legendre", True), ("svd_unscaled", False)])
def test_loss_gradient_finite_difference(kind, stacked, small_kdv):
    tr, _ = small_kdv
    gen = np.random.default_rng(5)
    model = dn.build_model(kind, tr, 3, 4, 2, gen, stacked=stacked, trunk_shape=(3, 2))
    target = dn.train_targets(model, tr)
    ev = dn.evaluate(model, tr.p_hat, target)
    grads = np.concatenate([g.ravel() for g in dn.gradient(model, ev)])
    arrays = model.arrays()
    shapes = [a.shape for a in arrays]

    def unflat(theta):
        out, pos = [], 0
        for s in shapes:
            k = int(np.prod(s))
            out.append(theta[pos : pos + k].reshape(s))
            pos += k
        return out

    def loss(theta):
        return dn.evaluate(model.with_arrays(unflat(theta)), tr.p_hat, target).loss

    theta0 = np.concatenate([a.ravel() for a in arrays])
    assert_fd_close(grads, central_fd(loss, theta0), rtol=1e-6, floor=1e-9)


def test_modified_loss_equals_branch_error(small_kdv, rng):
    tr, _ = small_kdv
    model = dn.build_model("svd_scaled", tr, 6, 5, 2, rng)
    ev = dn.evaluate(model, tr.p_hat, dn.train_targets(model, tr))
    eps_b = ed.decompose(dn.trunk(model), ev.bt.T, tr.a).eps_branch
    assert ev.loss == pytest.approx(eps_b / tr.a.size, rel=1e-10)
    # branch output equal to its own target gives zero loss
    assert dn.evaluate(model, tr.p_hat, ev.bt).loss == 0.0


def test_train_zero_epochs(small_kdv, rng):
    tr, te = small_kdv
    model = dn.build_model("svd_scaled", tr, 4, 5, 2, rng)
    out, hist = dn.train(model, tr, te, OptimizerConfig("GD", 1e-4), epochs=0)
    assert hist.epoch == [0] and len(hist.train_loss) == 1
    assert out is model
    assert hist.final_modes().n_modes == 4


def test_one_gd_step_first_order(small_kdv):
    tr, te = small_kdv
    model = dn.build_model("svd_scaled", tr, 4, 5, 2, np.random.default_rng(2))
    alpha = 1e-5
    ev = dn.evaluate(model, tr.p_hat, dn.train_targets(model, tr), n_points=tr.n)
    g2 = sum(float(np.sum(g * g)) for g in dn.gradient(model, ev, n_points=tr.n))
    _, hist = dn.train(model, tr, te, OptimizerConfig("GD", alpha), epochs=1)
    measured = hist.train_loss[1] - hist.train_loss[0]
    assert measured == pytest.approx(-alpha * g2, rel=0.1)


def test_fixed_trunk_constant_during_training(small_kdv, rng):
    tr, te = small_kdv
    model = dn.build_model("cosine", tr, 4, 5, 2, rng)
    before = dn.trunk(model).copy()
    out, hist = dn.train(model, tr, te, OptimizerConfig("Adam", 1e-3), epochs=5)
    np.testing.assert_array_equal(dn.trunk(out), before)
    assert hist.train_loss[-1] < hist.train_loss[0]
    learned = dn.build_model("learned", tr, 4, 5, 2, rng)
    out, _ = dn.train(learned, tr, te, OptimizerConfig("Adam", 1e-3), epochs=3)
    assert not np.array_equal(dn.trunk(out), dn.trunk(learned))


def test_train_records_modes_and_rejects_bad_reweight(small_kdv, rng):
    tr, te = small_kdv
    model = dn.build_model("svd_scaled", tr, 4, 5, 2, rng)
    _, hist = dn.train(model, tr, te, OptimizerConfig("Adam", 1e-3), epochs=6, mode_every=3)
    assert hist.mode_epochs == [0, 3, 6]
    rep = hist.final_modes()
    assert rep.L_test is not None and np.all(np.isfinite(rep.L_test))
    # history train loss is the sigma^2-weighted mode loss sum
    assert hist.train_loss[-1] == pytest.approx(float(np.sum(rep.weighted_train)) / tr.a.size, rel=1e-10)
    legendre = dn.build_model("legendre", tr, 4, 5, 2, rng)
    with pytest.raises(ValueError):
        dn.train(legendre, tr, te, OptimizerConfig("GD", 1e-3), e=-1.0, epochs=1)


def test_divergence_keeps_history(small_kdv, rng):
    tr, te = small_kdv
    model = dn.build_model("svd_scaled", tr, 4, 8, 2, rng)
    out, hist = dn.train(model, tr, te, OptimizerConfig("GD", 50.0), epochs=200)
    assert hist.diverged
    assert len(hist.epoch) == hist.diverged_epoch
    ev = dn.evaluate(out, tr.p_hat, dn.train_targets(out, tr))
    assert np.isfinite(ev.loss) and ev.loss <= dn.DIVERGENCE_LOSS


def test_history_csv_round_trip(tmp_path, small_kdv, rng):
    tr, te = small_kdv
    _, hist = dn.train(dn.build_model("svd_scaled", tr, 3, 4, 1, rng), tr, te, OptimizerConfig("GD", 1e-3), epochs=4)
    dn.write_history_csv(tmp_path / "h.csv", hist)
    back = dn.read_history_csv(tmp_path / "h.csv")
    assert back.epoch == hist.epoch and back.train_loss == hist.train_loss and back.lr == hist.lr
    with pytest.raises(ValueError):
        hist.record(2, 0.0, 0.0, 0.0)


def test_match_unstacked_width():
    assert dn.match_unstacked_width(42, 50, 5, 400) == 495
    assert dn.match_unstacked_width(17, 1, 3, 9) == 17
    target = 2 * nn.param_count(nn.MlpShape(2, 3, 1, 1))
    gaps = [abs(nn.param_count(nn.MlpShape(2, w, 1, 2)) - target) for w in range(1, 21)]
    assert dn.match_unstacked_width(3, 2, 1, 2) == 1 + int(np.argmin(gaps))


@pytest.mark.parametrize("kind,stacked", [("svd_scaled", True), ("learned", False), ("chebyshev", False)])
def test_model_checkpoint_round_trip(kind, stacked, tmp_path, small_kdv, rng):
    tr, _ = small_kdv
    model = dn.build_model(kind, tr, 3, 4, 2, rng, stacked=stacked)
    dn.save_model(tmp_path / "m", model)
    back = dn.load_model(tmp_path / "m")
    np.testing.assert_array_equal(dn.predict(back, tr.p_hat), dn.predict(model, tr.p_hat))
    assert back.fingerprint == tr.fingerprint()
    if model.modified:
        np.testing.assert_array_equal(back.phi1, model.phi1)
        np.testing.assert_array_equal(back.v1, model.v1)


@pytest.mark.slow
def test_coefficient_bound_ratio_grows_with_n():
    from modedecomp import pde_data as pdd

    prob = pdd.default_problem("KdV", 0.2, grid_points=60, input_dim=60)
    tr, te = pdd.build_dataset(prob, 80, 0, seed=1)
    ratios = []
    for n_basis in (2, 8, 20):
        model = dn.build_model("svd_scaled", tr, n_basis, 32, 3, np.random.default_rng(0))
        model, _ = dn.train(model, tr, None, OptimizerConfig("Adam", 1e-3), epochs=300)
        bt, _ = dn.branch_forward(model.branch, tr.p_hat)
        rep = ed.decompose(dn.trunk(model), bt.T, tr.a)
        ratios.append(rep.eps_d / rep.eps_branch)
    assert ratios[0] < ratios[1] < ratios[2]
