"""Dense matrix kernel: SVD, pseudoinverse, projection error, truncation.

Matrices are plain 2-D ``float64`` numpy arrays. Columns are samples (input
functions) and rows are grid points, so a data matrix ``A`` is ``n x m``.

The SVD is a one-sided (Hestenes) Jacobi iteration applied to the triangular
factor of a Householder QR. Vector pairs are visited in round-robin tournament
order, so every round rotates ``r/2`` disjoint pairs in one vectorized update.
The iteration is deterministic and computes small singular values to high
relative accuracy, which the trunk-error checks on rank-deficient data rely on.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError

EPS = np.finfo(np.float64).eps

__all__ = [
    "SvdFactors",
    "SvdSplit",
    "as_matrix",
    "svd",
    "reconstruct",
    "truncate",
    "default_rank_tol",
    "numerical_rank",
    "pseudoinverse",
    "projection_error",
    "spectral_norm",
    "write_matrix_csv",
    "read_matrix_csv",
]


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(s) @ v.T`` with ``r = min(rows, cols)``.

    ``s`` is descending. For every column of ``u`` the entry of largest
    magnitude is non-negative (first such row on ties); ``v`` carries the
    matching sign.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank_bound(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class SvdSplit:
    """Leading ``N`` singular triples and the remainder."""

    phi1: np.ndarray
    sigma1: np.ndarray
    v1: np.ndarray
    phi2: np.ndarray
    sigma2: np.ndarray
    v2: np.ndarray

    @property
    def n_keep(self) -> int:
        return self.sigma1.shape[0]


def as_matrix(a, name="matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def _round_robin(r):
    """Pairings of ``0..r-1`` such that every pair meets once per sweep."""
    players = list(range(r)) + ([-1] if r % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_rows(h, max_sweeps=80):
    """Orthogonalize the rows of ``h`` by plane rotations, in place.

    Returns the rotated ``h`` and the accumulated orthogonal ``w`` with
    ``h_out = w @ h_in``; the rows of ``h_out`` are mutually orthogonal to
    working precision relative to their norms.
    """
    k, length = h.shape
    w = np.eye(k)
    if k < 2:
        return h, w
    tol = EPS * max(length, 1)
    rounds = _round_robin(k)
    for _ in range(max_sweeps):
        rotated = 0
        for p, q in rounds:
            hp = h[p]
            hq = h[q]
            alpha = np.einsum("ij,ij->i", hp, hp)
            beta = np.einsum("ij,ij->i", hq, hq)
            gamma = np.einsum("ij,ij->i", hp, hq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated += int(active.sum())
            gam = np.where(active, gamma, 1.0)
            with np.errstate(over="ignore"):
                # a tiny off-diagonal term overflows zeta; t -> 0 is the right limit
                zeta = (beta - alpha) / (2.0 * gam)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None]
            s = np.where(active, s, 0.0)[:, None]
            h[p] = c * hp - s * hq
            h[q] = s * hp + c * hq
            wp = w[p]
            wq = w[q]
            w[p] = c * wp - s * wq
            w[q] = s * wp + c * wq
        if rotated == 0:
            break
    return h, w


def _svd_tall(x):
    """Left vectors, singular values and right vectors of a tall ``x``.

    ``x = Q R`` (Householder), then Jacobi on the rows of ``R`` gives
    ``R = W^T diag(s) Y`` so ``x = (Q W^T) diag(s) Y``.
    """
    q, r = np.linalg.qr(x)
    h, w = _jacobi_rows(r.copy())
    s = np.linalg.norm(h, axis=1)
    order = np.argsort(-s, kind="stable")
    s, h, w = s[order], h[order], w[order]
    left = q @ w.T
    right = _normalize_columns(h.T, s)
    return left, s, right


def _complete_orthonormal(u, valid):
    """Replace the columns of ``u`` flagged invalid by an orthonormal completion."""
    rows = u.shape[0]
    basis = [u[:, k] for k in np.flatnonzero(valid)]
    candidate = 0
    for k in np.flatnonzero(~valid):
        while True:
            if candidate >= rows:
                raise ArithmeticError("could not complete orthonormal basis")
            w = np.zeros(rows)
            w[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            nrm = np.linalg.norm(w)
            if nrm > 0.5:
                w /= nrm
                break
        u[:, k] = w
        basis.append(w)
    return u


def _normalize_columns(g, s):
    tiny = np.finfo(np.float64).tiny * 1e3
    valid = s > tiny
    u = np.zeros_like(g)
    u[:, valid] = g[:, valid] / s[valid]
    if not valid.all():
        u = _complete_orthonormal(u, valid)
    return u


def _apply_sign_convention(u, v):
    if u.shape[1] == 0 or u.shape[0] == 0:
        return u, v
    lead = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[lead, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, v * signs


def svd(a) -> SvdFactors:
    """Thin SVD of a dense real matrix by one-sided Jacobi.

    Parameters
    ----------
    a : array_like, shape (n, m)

    Returns
    -------
    SvdFactors
        ``u`` (n x r), ``s`` (r,), ``v`` (m x r) with ``r = min(n, m)``.
    """
    a = as_matrix(a, "a")
    n, m = a.shape
    r = min(n, m)
    if r == 0:
        return SvdFactors(np.zeros((n, 0)), np.zeros(0), np.zeros((m, 0)))

    if n >= m:
        u, s, v = _svd_tall(a)
    else:
        v, s, u = _svd_tall(a.T)
    u, v = _apply_sign_convention(u, v)
    return SvdFactors(u=u, s=s, v=v)


def reconstruct(f: SvdFactors) -> np.ndarray:
    return (f.u * f.s) @ f.v.T


def truncate(f: SvdFactors, n_keep: int) -> SvdSplit:
    """Split the factors into the leading ``n_keep`` triples and the rest."""
    r = f.s.shape[0]
    if n_keep < 0 or n_keep > r:
        raise ValueError(f"n_keep={n_keep} outside [0, {r}]")
    return SvdSplit(
        phi1=f.u[:, :n_keep],
        sigma1=f.s[:n_keep],
        v1=f.v[:, :n_keep],
        phi2=f.u[:, n_keep:],
        sigma2=f.s[n_keep:],
        v2=f.v[:, n_keep:],
    )


def default_rank_tol(shape, s_max):
    return EPS * max(shape) * s_max


def numerical_rank(a, tol=None) -> int:
    f = a if isinstance(a, SvdFactors) else svd(a)
    if f.s.size == 0:
        return 0
    shape = (f.u.shape[0], f.v.shape[0])
    if tol is None:
        tol = default_rank_tol(shape, f.s[0])
    return int(np.count_nonzero(f.s > tol))


def pseudoinverse(t, tol=None) -> np.ndarray:
    """Moore-Penrose inverse; singular values ``<= tol`` count as zero.

    The default tolerance is ``eps * max(rows, cols) * s_max``.
    """
    if tol is not None and tol < 0:
        raise ValueError("tol must be non-negative")
    f = svd(t)
    if f.s.size == 0:
        return np.zeros((f.v.shape[0], f.u.shape[0]))
    if tol is None:
        tol = default_rank_tol((f.u.shape[0], f.v.shape[0]), f.s[0])
    keep = f.s > tol
    return (f.v[:, keep] / f.s[keep]) @ f.u[:, keep].T


def _range_basis(t, tol=None):
    f = svd(t)
    if f.s.size == 0:
        return f.u
    if tol is None:
        tol = default_rank_tol((f.u.shape[0], f.v.shape[0]), f.s[0])
    return f.u[:, f.s > tol]


def projection_error(t, a, tol=None) -> float:
    """Squared Frobenius norm of ``(I - t t^+) a``.

    ``t t^+`` is formed as ``U_k U_k^T`` from the numerical range of ``t``,
    which is the same projector without the ``1/s`` amplification.
    """
    t = as_matrix(t, "t")
    a = as_matrix(a, "a")
    if t.shape[0] != a.shape[0]:
        raise ShapeError(f"t has {t.shape[0]} rows but a has {a.shape[0]}")
    if t.shape[1] == 0:
        return float(np.sum(a * a))
    q = _range_basis(t, tol)
    resid = a - q @ (q.T @ a)
    return float(np.sum(resid * resid))


def spectral_norm(t, tol=1e-10, max_iter=10_000) -> float:
    """Largest singular value by power iteration on ``t.T @ t``."""
    t = as_matrix(t, "t")
    if t.size == 0:
        return 0.0
    x = np.random.default_rng(0).standard_normal(t.shape[1])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = t.T @ (t @ x)
        lam_new = float(x @ y)
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        x = y / nrm
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def write_matrix_csv(path, a) -> None:
    """Write ``rows,cols`` then one matrix row per line, 17 significant digits."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    rows, cols = a.shape
    lines = [f"{rows},{cols}"]
    for row in a:
        lines.append(",".join(format(float(x), ".17g") for x in row))
    with open(os.fspath(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(os.fspath(path), encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    rows, cols = (int(x) for x in lines[0].split(","))
    out = np.zeros((rows, cols))
    for i in range(rows):
        line = lines[1 + i]
        if cols:
            vals = line.split(",")
            if len(vals) != cols:
                raise ShapeError(f"{path}: row {i} has {len(vals)} entries, expected {cols}")
            out[i] = [float(x) for x in vals]
    return out
