import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modedecomp import spectral as sp
from modedecomp.errors import ShapeError
from modedecomp.linalg import svd


def brute_knn(x, k):
    m = x.shape[1]
    idx = np.empty((m, k), dtype=int)
    for i in range(m):
        d = [(float(np.linalg.norm(x[:, i] - x[:, j])), j) for j in range(m) if j != i]
        d.sort()
        idx[i] = [j for _, j in d[:k]]
    return idx


def test_knn_line_example():
    g = sp.knn(np.array([[0.0, 1.0, 3.0]]), 1)
    np.testing.assert_array_equal(g.indices.ravel(), [1, 0, 1])
    np.testing.assert_array_equal(g.distances.ravel(), [1.0, 1.0, 2.0])


def test_knn_ties_go_to_lower_index():
    g = sp.knn(np.array([[0.0, -1.0, 1.0]]), 1)
    assert g.indices[0, 0] == 1


def test_knn_brute_force(rng):
    x = rng.standard_normal((3, 50))
    np.testing.assert_array_equal(sp.knn(x, 5).indices, brute_knn(x, 5))


def test_knn_validation_and_duplicates():
    with pytest.raises(ValueError):
        sp.knn(np.zeros((2, 3)), 3)
    with pytest.raises(ValueError):
        sp.knn(np.zeros((2, 3)), 0)
    with pytest.warns(RuntimeWarning):
        g = sp.knn(np.array([[0.0, 0.0, 1.0]]), 1)
    assert g.has_duplicates


def test_tv_linear_and_constant(rng):
    x = np.sort(rng.uniform(0, 1, 30))[None, :]
    assert sp.tv_frequency(x, x[0], 3) == pytest.approx(1.0, rel=1e-12)
    assert sp.tv_frequency(x, np.full(30, 4.2), 3) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10, allow_nan=False).filter(lambda c: abs(c) > 1e-3), st.integers(0, 2**31 - 1))
def test_tv_homogeneous(c, seed):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((2, 20))
    y = gen.standard_normal(20)
    assert sp.tv_frequency(x, c * y, 3) == pytest.approx(abs(c) * sp.tv_frequency(x, y, 3), rel=1e-12)


def test_tv_rejects_coincident_points():
    x = np.array([[0.0, 0.0, 1.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(ValueError):
            sp.tv_frequency(x, [1.0, 2.0, 3.0], 1)
    with pytest.raises(ShapeError):
        sp.tv_frequency(np.array([[0.0, 1.0]]), [1.0], 1)


def test_laplacian_two_nodes():
    w = math.exp(-0.5)
    x = np.array([[0.0, 1.0]])
    assert sp.laplacian_energy(x, [1.0, -1.0], 1) == pytest.approx(2 * w, rel=1e-14)
    assert sp.laplacian_energy(x, [3.0, 3.0], 1) == 0.0
    with pytest.raises(ValueError):
        sp.laplacian_energy(x, [0.0, 0.0], 1)


def test_laplacian_rayleigh_bounds(rng):
    x = rng.standard_normal((3, 40))
    lap = sp.laplacian_matrix(x, 6)
    np.testing.assert_allclose(lap, lap.T)
    np.testing.assert_allclose(lap @ np.ones(40) @ np.ones(40), 0.0, atol=1e-12)
    ev = np.linalg.eigvalsh(lap)
    for _ in range(5):
        y = rng.standard_normal(40)
        le = sp.laplacian_energy(x, y, 6)
        assert ev[0] - 1e-12 <= le <= ev[-1] + 1e-12
        assert le == pytest.approx(float(y @ lap @ y / (y @ y)), rel=1e-10)
        assert sp.laplacian_energy(x, 5.0 * y, 6) == pytest.approx(le, rel=1e-12)
        # uniform rescaling of the points leaves the Gaussian weights unchanged
        assert sp.laplacian_energy(3.0 * x, y, 6) == pytest.approx(le, rel=1e-12)


def test_projected_fourier_single_tone():
    x = ((np.arange(400) + 0.5) / 400)[None, :]
    f = 6.0
    est = sp.projected_fourier(x, np.cos(2 * np.pi * f * x[0]), projections=np.ones((1, 1)),
                               freq_grid=np.linspace(0, 20, 401))
    assert est == pytest.approx(f, rel=0.1)
    with pytest.raises(ValueError):
        sp.projected_fourier(x, np.zeros(400))
    with pytest.raises(ShapeError):
        sp.projected_fourier(x, np.ones(400), projections=np.ones((1, 2)))


def test_projected_fourier_orders_tones(rng):
    x = rng.uniform(0, 1, (2, 300))
    ests = [sp.projected_fourier(x, np.sin(2 * np.pi * f * x.sum(axis=0))) for f in (1.0, 3.0, 6.0)]
    assert ests[0] < ests[1] < ests[2]


def test_estimate_all_and_relative(rng):
    x = rng.standard_normal((2, 30))
    y = np.column_stack([x[0], 2 * x[0]])
    est = sp.estimate_all(x, y, "TV", k=3)
    np.testing.assert_allclose(est.relative, [0.5, 1.0])
    with pytest.raises(ValueError):
        sp.estimate_all(x, y, "Wavelet")


def test_synthetic_frequencies_and_singular_values():
    spec = sp.SyntheticSpec(n_modes=5, alpha=0.2, beta=-0.01)
    np.testing.assert_allclose(spec.frequencies(), 2.0 * np.exp(0.2 * np.arange(5)))
    neg = sp.SyntheticSpec(n_modes=5, alpha=-0.2)
    np.testing.assert_allclose(neg.frequencies(), 2.0 * np.exp(-0.2 * (np.arange(5) - 5)))
    s = spec.singular_values()
    assert s[0] ** 2 / s[4] ** 2 == pytest.approx(1.0833, rel=1e-4)
    s = sp.SyntheticSpec(beta=-0.5).singular_values()
    assert s[0] ** 2 / s[4] ** 2 == pytest.approx(54.598, rel=1e-4)
    with pytest.raises(ValueError):
        sp.SyntheticSpec(beta=0.0)
    with pytest.raises(ValueError):
        sp.SyntheticSpec(n_modes=10, m=5)


def test_sample_points_range(rng):
    x = sp.sample_points(200, 4, rng)
    assert x.shape == (4, 200)
    assert x.min() >= 0.0 and x.max() <= 1.1


def test_synthesis_orthonormal_and_dataset(rng):
    spec = sp.SyntheticSpec(n_modes=6)
    tr, te, fn = sp.synth_dataset(spec, rng, m_test=20)
    np.testing.assert_allclose(fn.v.T @ fn.v, np.eye(6), atol=1e-10)
    np.testing.assert_allclose(fn.evaluate(fn.points), fn.v, atol=1e-10)
    f = svd(tr.a)
    np.testing.assert_allclose(f.s, spec.singular_values(), rtol=1e-10)
    assert te.a.shape == (6, 20) and te.p_hat.shape == (5, 20)


def test_synthesis_budget_error():
    spec = sp.SyntheticSpec(n_modes=5, m=6, trials=1, threshold=1e-9)
    with pytest.raises(sp.SynthesisError):
        sp.synth_rsf(spec, np.random.default_rng(0))


def test_frequencies_csv_round_trip(tmp_path):
    sp.write_frequencies_csv(tmp_path / "f.csv", [1.0, 2.0], [0.5, float("nan")], [3.0, 4.0])
    back = sp.read_frequencies_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(back["mode"], [1, 2])
    assert np.isnan(back["le_k50"][1]) and np.all(np.isnan(back["dictated"]))


def test_spearman_examples():
    assert sp.spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert sp.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


@pytest.mark.xfail(strict=True, reason="the wide-neighborhood Laplacian energy saturates across modes")
def test_laplacian_energy_wide_tracks_frequency():
    spec = sp.SyntheticSpec(n_modes=8, m=300, alpha=0.2)
    fn = sp.synth_rsf(spec, np.random.default_rng(0))
    le = sp.estimate_all(fn.points, fn.v, "LaplacianEnergy", k=50).values
    assert sp.spearman(le, fn.frequencies) > 0.9
