"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest


def jacobi_eigh(s, tol=1e-15, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by classical two-sided Jacobi rotations.

    Kept deliberately separate from the package's one-sided SVD so it can
    serve as an oracle for singular values via ``eig(a.T @ a)``.
    """
    a = np.array(s, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(1.0, np.linalg.norm(a)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = sn, -sn
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))[::-1]


def random_orthonormal(rng, n, k):
    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.sign(np.diag(r))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_fd(loss, theta, h=1e-5):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    theta = np.array(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        up = loss(theta)
        theta[i] = old - h
        down = loss(theta)
        theta[i] = old
        g[i] = (up - down) / (2.0 * h)
    return g


def assert_fd_close(analytic, numeric, rtol=1e-6, floor=1e-8):
    """Elementwise ``|a - n| <= rtol * max(|a|, |n|) + floor``.

    The absolute floor covers entries whose true value is below the
    finite-difference truncation/roundoff level.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    bad = np.abs(analytic - numeric) > bound
    assert not bad.any(), (
        f"{int(bad.sum())} entries off; worst at {int(np.argmax(np.abs(analytic - numeric) - bound))}: "
        f"{analytic[bad][:3]} vs {numeric[bad][:3]}"
    )


@pytest.fixture(scope="session")
def small_kdv():
    """Tiny KdV train/test pair (n = M = 30, m = 24 / 8)."""
    from modedecomp import pde_data as pdd

    prob = pdd.default_problem("KdV", 0.2, grid_points=30, input_dim=30)
    return pdd.build_dataset(prob, 24, 8, seed=3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
