"""Trunk/branch error split and the per-mode decomposition of the branch error.

For trunk matrix ``T`` (n x N), branch matrix ``B`` (m x N) and data ``A``
(n x m) the squared error of ``T B^T`` splits orthogonally as::

    ||T B^T - A||^2 = ||T (B^T - T^+ A)||^2 + ||(I - T T^+) A||^2
                      branch error             trunk error

With the scaled SVD trunk ``T = Phi_1 Sigma_1`` the branch error further
splits into ``sum_i sigma_i^2 L_i`` where ``L_i = ||b_i - v_i||^2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import EPS, as_matrix, projection_error, pseudoinverse, spectral_norm

GAP_FLAG = 1e-8


@dataclass(frozen=True)
class ErrorReport:
    eps_total: float
    eps_trunk: float
    eps_branch: float
    eps_c: float
    eps_d: float
    norm_a: float

    def _delta(self, eps):
        return math.sqrt(max(eps, 0.0)) / self.norm_a if self.norm_a > 0 else float("nan")

    @property
    def delta_total(self):
        return self._delta(self.eps_total)

    @property
    def delta_trunk(self):
        return self._delta(self.eps_trunk)

    @property
    def delta_branch(self):
        return self._delta(self.eps_branch)

    @property
    def identity_gap(self):
        """Relative mismatch of ``eps_total`` and ``eps_trunk + eps_branch``."""
        scale = max(self.eps_total, self.eps_trunk + self.eps_branch, np.finfo(float).tiny)
        return abs(self.eps_total - self.eps_trunk - self.eps_branch) / scale

    def to_dict(self):
        return {
            "eps_total": self.eps_total,
            "eps_trunk": self.eps_trunk,
            "eps_branch": self.eps_branch,
            "eps_c": self.eps_c,
            "eps_d": self.eps_d,
            "norm_a": self.norm_a,
            "delta_total": self.delta_total,
            "delta_trunk": self.delta_trunk,
            "delta_branch": self.delta_branch,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(*(float(d[k]) for k in ("eps_total", "eps_trunk", "eps_branch", "eps_c", "eps_d", "norm_a")))


def _fro2(x):
    return float(np.sum(x * x))


def decompose(t, b, a) -> ErrorReport:
    """Split ``||t b^T - a||_F^2`` into trunk and branch parts.

    Also returns the coefficient error ``eps_c = ||b^T - t^+ a||^2`` and the
    bound ``eps_d = ||t||_2^2 eps_c >= eps_branch``.
    """
    t = as_matrix(t, "t")
    b = as_matrix(b, "b")
    a = as_matrix(a, "a")
    if t.shape[0] != a.shape[0] or b.shape[0] != a.shape[1] or t.shape[1] != b.shape[1]:
        raise ShapeError(f"non-conformal shapes t{t.shape}, b{b.shape}, a{a.shape}")
    coef_err = b.T - pseudoinverse(t) @ a
    eps_c = _fro2(coef_err)
    return ErrorReport(
        eps_total=_fro2(t @ b.T - a),
        eps_trunk=projection_error(t, a),
        eps_branch=_fro2(t @ coef_err),
        eps_c=eps_c,
        eps_d=spectral_norm(t) ** 2 * eps_c,
        norm_a=math.sqrt(_fro2(a)),
    )


def optimal_branch(t, a) -> np.ndarray:
    """``(t^+ a)^T``, the branch matrix minimizing ``||a - t b^T||_F``."""
    t = as_matrix(t, "t")
    a = as_matrix(a, "a")
    if t.shape[0] != a.shape[0]:
        raise ShapeError(f"t has {t.shape[0]} rows but a has {a.shape[0]}")
    return (pseudoinverse(t) @ a).T


@dataclass(frozen=True)
class ModeLossReport:
    """Per-mode losses; train or test fields may be ``None`` when not computed."""

    sigma: np.ndarray
    L_train: np.ndarray | None = None
    base_train: np.ndarray | None = None
    L_test: np.ndarray | None = None
    base_test: np.ndarray | None = None

    @property
    def n_modes(self):
        return self.sigma.size

    @property
    def weighted_train(self):
        return None if self.L_train is None else self.sigma**2 * self.L_train

    @property
    def weighted_test(self):
        return None if self.L_test is None else self.sigma**2 * self.L_test

    @property
    def improved_train(self):
        return None if self.L_train is None else self.L_train < self.base_train

    @property
    def improved_test(self):
        return None if self.L_test is None else self.L_test < self.base_test

    @property
    def degenerate_gaps(self):
        """Indices ``i`` (0-based) where ``sigma_i - sigma_{i+1}`` is below ``1e-8 sigma_1``."""
        if self.sigma.size < 2:
            return []
        gaps = self.sigma[:-1] - self.sigma[1:]
        return [int(i) for i in np.flatnonzero(gaps < GAP_FLAG * self.sigma[0])]

    def merged(self, other: "ModeLossReport") -> "ModeLossReport":
        if other.sigma.shape != self.sigma.shape:
            raise ShapeError("mode counts differ")
        pick = lambda x, y: x if x is not None else y  # noqa: E731
        return ModeLossReport(
            sigma=self.sigma,
            L_train=pick(self.L_train, other.L_train),
            base_train=pick(self.base_train, other.base_train),
            L_test=pick(self.L_test, other.L_test),
            base_test=pick(self.base_test, other.base_test),
        )


def _check_modes(b, target, sigma):
    if b.shape != target.shape:
        raise ShapeError(f"branch output {b.shape} does not match targets {target.shape}")
    if sigma.size != b.shape[1]:
        raise ShapeError(f"{sigma.size} singular values for {b.shape[1]} modes")


def mode_losses_train(b_train, v1, sigma1) -> ModeLossReport:
    """``L_i = ||b_i - v_i||^2`` with base loss ``||v_i||^2`` (= 1)."""
    b = as_matrix(b_train, "b_train")
    v1 = as_matrix(v1, "v1")
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    _check_modes(b, v1, sigma1)
    diff = b - v1
    return ModeLossReport(
        sigma=sigma1,
        L_train=np.einsum("ij,ij->j", diff, diff),
        base_train=np.einsum("ij,ij->j", v1, v1),
    )


def test_coefficients(phi1, sigma1, a_test, tol=None) -> np.ndarray:
    """Optimal test coefficients ``W_1 = (Sigma_1^-1 Phi_1^T A_te)^T``."""
    phi1 = as_matrix(phi1, "phi1")
    a_test = as_matrix(a_test, "a_test")
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    if phi1.shape[0] != a_test.shape[0]:
        raise ShapeError(f"phi1 has {phi1.shape[0]} rows, a_test has {a_test.shape[0]}")
    if sigma1.size != phi1.shape[1]:
        raise ShapeError("one singular value per mode required")
    if sigma1.size:
        if tol is None:
            tol = EPS * max(phi1.shape[0], a_test.shape[1]) * sigma1[0]
        small = np.flatnonzero(sigma1 <= tol)
        if small.size:
            raise ValueError(
                f"singular value(s) at mode index {small.tolist()} below tolerance {tol:.3g}; "
                "test coefficients would divide by ~0"
            )
    return ((phi1.T @ a_test) / sigma1[:, None]).T


test_coefficients.__test__ = False  # not a pytest test despite the name


def mode_losses_test(b_test, w1, m_tr, m_te, sigma1) -> ModeLossReport:
    """``L_i,te = (m_tr/m_te) ||b_i - w_i||^2`` and base ``(m_tr/m_te) ||w_i||^2``."""
    if m_te <= 0:
        raise ValueError("test set is empty")
    b = as_matrix(b_test, "b_test")
    w1 = as_matrix(w1, "w1")
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    _check_modes(b, w1, sigma1)
    factor = m_tr / m_te
    diff = b - w1
    return ModeLossReport(
        sigma=sigma1,
        L_test=factor * np.einsum("ij,ij->j", diff, diff),
        base_test=factor * np.einsum("ij,ij->j", w1, w1),
    )


MODES_COLUMNS = ["i", "sigma", "L_train", "L_test", "weighted_train", "weighted_test", "base_train", "base_test"]


def _fmt(x):
    return "" if x is None else format(float(x), ".17g")


def write_modes_csv(path, report: ModeLossReport) -> None:
    cols = [report.sigma, report.L_train, report.L_test, report.weighted_train,
            report.weighted_test, report.base_train, report.base_test]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MODES_COLUMNS)
        for i in range(report.n_modes):
            w.writerow([i + 1] + [_fmt(None if c is None else c[i]) for c in cols])


def read_modes_csv(path) -> ModeLossReport:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0].keys()) != MODES_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {list(rows[0].keys())}")

    def col(name):
        vals = [r[name] for r in rows]
        if any(v == "" for v in vals):
            return None
        return np.array([float(v) for v in vals])

    sigma = col("sigma")
    return ModeLossReport(
        sigma=sigma if sigma is not None else np.zeros(0),
        L_train=col("L_train"),
        base_train=col("base_train"),
        L_test=col("L_test"),
        base_test=col("base_test"),
    )
