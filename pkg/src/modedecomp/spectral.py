"""Frequency estimators for scattered samples and synthetic right singular functions.

A target function ``g: R^M -> R`` is only known through samples
``(x_i, y_i)``; points are the columns of an ``M x m`` array. Three proxies
for its mean frequency are provided:

* ``tv_frequency``: kNN finite-difference estimate of the total variation;
* ``laplacian_energy``: Rayleigh quotient of ``y`` on a kNN graph Laplacian;
* ``projected_fourier``: spectral centroid of non-uniform DFTs of 1-D projections.

``synth_rsf`` builds orthonormal sample vectors ``v_j`` from sinusoids with
prescribed frequencies, used as targets for a branch network.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import as_matrix, svd
from .pde_data import Dataset, interior_points

CHUNK = 512
THRESHOLD = 0.05
DEFAULT_TRIALS = 200
DEFAULT_FREQ_POINTS = 64


@dataclass(frozen=True)
class KnnGraph:
    """Neighbor indices and distances (both ``m x k``), nearest first."""

    indices: np.ndarray
    distances: np.ndarray
    has_duplicates: bool


def knn(points, k) -> KnnGraph:
    """Exact k nearest neighbors, self excluded, ties to the lower index.

    Parameters
    ----------
    points : array_like, shape (M, m)
    k : int
        ``1 <= k < m``.
    """
    x = as_matrix(points, "points")
    m = x.shape[1]
    if not 1 <= k < m:
        raise ValueError(f"need 1 <= k < m, got k={k}, m={m}")
    step = max(1, min(CHUNK, int(4e6 // max(1, m * x.shape[0]))))
    idx = np.empty((m, k), dtype=np.intp)
    dist = np.empty((m, k))
    for start in range(0, m, step):
        rows = slice(start, min(start + step, m))
        # direct differences keep exact zeros for duplicates; the Gram trick would not
        diff = x[:, rows].T[:, None, :] - x.T[None, :, :]
        d2 = np.einsum("abk,abk->ab", diff, diff)
        d2[np.arange(d2.shape[0]), np.arange(rows.start, rows.stop)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[rows] = order
        dist[rows] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    dup = bool(np.any(dist == 0.0))
    if dup:
        warnings.warn("duplicate sample points at zero distance", RuntimeWarning, stacklevel=2)
    return KnnGraph(idx, dist, dup)


def _check_y(points, y):
    x = as_matrix(points, "points")
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != x.shape[1]:
        raise ShapeError(f"{y.size} values for {x.shape[1]} points")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    return x, y


def tv_frequency(points, y, k, graph: KnnGraph | None = None) -> float:
    """``(1/(m k)) sum_i sum_{j in N_k(i)} |y_i - y_j| / ||x_i - x_j||``."""
    x, y = _check_y(points, y)
    g = graph if graph is not None else knn(x, k)
    if np.any(g.distances == 0.0):
        i, j = np.argwhere(g.distances == 0.0)[0]
        raise ValueError(f"points {int(i)} and {int(g.indices[i, j])} coincide; difference quotient undefined")
    quot = np.abs(y[:, None] - y[g.indices]) / g.distances
    return float(quot.sum() / quot.size)


def _edge_weights(g: KnnGraph, k):
    d2 = g.distances**2
    denom = d2.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(denom > 0, d2 / denom, 0.0)
    return np.exp(-(k / 2.0) * ratio)


def laplacian_matrix(points, k, graph: KnnGraph | None = None) -> np.ndarray:
    """Symmetrized Laplacian ``(L0 + L0^T)/2`` of the directed Gaussian kNN graph."""
    x = as_matrix(points, "points")
    g = graph if graph is not None else knn(x, k)
    w = _edge_weights(g, k)
    m = x.shape[1]
    l0 = np.zeros((m, m))
    rows = np.repeat(np.arange(m), k)
    np.add.at(l0, (rows, g.indices.ravel()), -w.ravel())
    l0[np.arange(m), np.arange(m)] += w.sum(axis=1)
    return 0.5 * (l0 + l0.T)


def laplacian_energy(points, y, k, graph: KnnGraph | None = None) -> float:
    """Rayleigh quotient ``y^T L y / y^T y`` on the symmetrized kNN graph.

    Evaluated edge-wise as ``sum_(i,j) w_ij y_i (y_i - y_j)``, which equals
    ``y^T L0 y = y^T L y`` and is exactly zero for constant ``y``.
    """
    x, y = _check_y(points, y)
    yy = float(y @ y)
    if yy == 0.0:
        raise ValueError("Rayleigh quotient undefined for y = 0")
    g = graph if graph is not None else knn(x, k)
    w = _edge_weights(g, k)
    energy = float(np.sum(w * y[:, None] * (y[:, None] - y[g.indices])))
    return energy / yy


def default_projections(points, z) -> np.ndarray:
    """First ``z`` left singular vectors of the point matrix, as rows (z x M)."""
    x = as_matrix(points, "points")
    if not 1 <= z <= min(x.shape):
        raise ValueError(f"z={z} outside [1, {min(x.shape)}]")
    return svd(x).u[:, :z].T


def default_freq_grid(points, projections, count=DEFAULT_FREQ_POINTS) -> np.ndarray:
    """``count`` uniform frequencies from 0 to ``m / (2 * projected range)``."""
    proj = np.atleast_2d(projections) @ as_matrix(points, "points")
    span = float(np.max(proj.max(axis=1) - proj.min(axis=1)))
    if span <= 0:
        raise ValueError("projected points have zero spread")
    return np.linspace(0.0, proj.shape[1] / (2.0 * span), count)


def projected_fourier(points, y, projections=None, freq_grid=None) -> float:
    """Spectral centroid of the averaged non-uniform DFT of 1-D projections.

    For each unit vector ``u_j`` the pseudo-samples ``(u_j^T x_i, y_i)`` give
    ``F_j(f) = sum_i y_i exp(-2 pi i f u_j^T x_i)``; with ``q = mean_j F_j``
    the estimate is ``sum |q|^2 f / sum |q|^2`` over ``freq_grid``.
    """
    x, y = _check_y(points, y)
    if projections is None:
        projections = default_projections(x, min(x.shape))
    u = np.atleast_2d(np.asarray(projections, dtype=np.float64))
    if u.shape[0] == 0:
        raise ValueError("need at least one projection")
    if u.shape[1] != x.shape[0]:
        raise ShapeError(f"projections have dimension {u.shape[1]}, points {x.shape[0]}")
    freqs = default_freq_grid(x, u) if freq_grid is None else np.asarray(freq_grid, dtype=np.float64).ravel()
    if freqs.size == 0:
        raise ValueError("empty frequency grid")
    proj = u @ x  # z x m
    q = np.zeros(freqs.size, dtype=np.complex128)
    for row in proj:
        q += np.exp(-2j * np.pi * np.outer(freqs, row)) @ y
    power = np.abs(q / u.shape[0]) ** 2
    total = float(power.sum())
    if total == 0.0:
        raise ValueError("spectrum is identically zero; estimate undefined")
    return float(np.sum(power * freqs) / total)


@dataclass(frozen=True)
class FrequencyEstimate:
    method: str
    k_neighbors: int | None
    values: np.ndarray

    @property
    def relative(self):
        top = float(np.max(self.values)) if self.values.size else 0.0
        return self.values / top if top > 0 else self.values.copy()


def estimate_all(points, targets, method, k=None, **kwargs) -> FrequencyEstimate:
    """One estimate per column of ``targets`` (m x N)."""
    targets = np.asarray(targets, dtype=np.float64)
    if method == "TV":
        g = knn(points, k)
        vals = [tv_frequency(points, targets[:, j], k, g) for j in range(targets.shape[1])]
    elif method == "LaplacianEnergy":
        g = knn(points, k)
        vals = [laplacian_energy(points, targets[:, j], k, g) for j in range(targets.shape[1])]
    elif method == "ProjectedFourier":
        vals = [projected_fourier(points, targets[:, j], **kwargs) for j in range(targets.shape[1])]
    else:
        raise ValueError(f"unknown method {method!r}")
    return FrequencyEstimate(method, k, np.array(vals))


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_modes: int = 5
    f0: float = 2.0
    alpha: float = 0.2
    beta: float = -0.01
    m: int = 300
    input_dim: int = 5
    trials: int = DEFAULT_TRIALS
    threshold: float = THRESHOLD
    unit_directions: bool = True

    def __post_init__(self):
        if self.beta == 0:
            raise ValueError("beta must be nonzero; beta = 0 leaves the mode order undefined")
        if not self.f0 > 0:
            raise ValueError("f0 must be positive")
        if min(self.n_modes, self.m, self.input_dim, self.trials) < 1:
            raise ValueError("n_modes, m, input_dim and trials must be >= 1")
        if self.n_modes > self.m:
            raise ValueError("cannot build more orthonormal vectors than samples")

    def frequencies(self) -> np.ndarray:
        j = np.arange(1, self.n_modes + 1)
        if self.alpha > 0:
            return self.f0 * np.exp(self.alpha * (j - 1))
        return self.f0 * np.exp(self.alpha * (j - 1 - self.n_modes))

    def singular_values(self) -> np.ndarray:
        return np.exp(self.beta * np.arange(1, self.n_modes + 1))


class SynthesisError(RuntimeError):
    def __init__(self, mode):
        super().__init__(f"no candidate accepted for mode {mode} within the trial budget")
        self.mode = mode


def sample_points(m, input_dim, rng) -> np.ndarray:
    """``x = a (1 + 0.1 b)`` with ``a ~ U[0,1]``, ``b ~ U[-1,1]^M``; columns are points."""
    out = np.empty((input_dim, m))
    for i in range(m):
        a = rng.uniform(0.0, 1.0)
        b = rng.uniform(-1.0, 1.0, size=input_dim)
        out[:, i] = a * (1.0 + 0.1 * b)
    return out


def _mgs(w):
    """Modified Gram-Schmidt ``w = q r`` (columns)."""
    q = w.copy()
    n = q.shape[1]
    r = np.zeros((n, n))
    for j in range(n):
        for i in range(j):
            r[i, j] = q[:, i] @ q[:, j]
            q[:, j] -= r[i, j] * q[:, i]
        r[j, j] = np.linalg.norm(q[:, j])
        if r[j, j] == 0:
            raise ArithmeticError(f"column {j} is linearly dependent")
        q[:, j] /= r[j, j]
    return q, r


@dataclass(frozen=True)
class SyntheticFunctions:
    """Accepted sinusoids and the triangular map to the orthonormal ``v``.

    ``v = raw(points) @ inv(r)`` where ``raw`` evaluates the normalized
    candidates; :meth:`evaluate` applies the same map at new points.
    """

    points: np.ndarray
    v: np.ndarray
    frequencies: np.ndarray
    directions: np.ndarray  # N x M
    norms: np.ndarray
    r: np.ndarray

    def raw(self, points):
        phase = 2.0 * np.pi * self.frequencies[:, None] * (self.directions @ points)
        return (np.sin(phase) / self.norms[:, None]).T

    def evaluate(self, points):
        return np.linalg.solve(self.r.T, self.raw(points).T).T


def synth_rsf(spec: SyntheticSpec, rng) -> SyntheticFunctions:
    """Orthonormal right singular vectors with prescribed frequencies.

    Candidates ``sin(2 pi f_j d^T x)`` with ``d ~ N(1, I)`` are normalized and
    accepted once their largest absolute inner product with the accepted
    vectors is below ``spec.threshold``; at most ``spec.trials`` draws per
    mode. A modified Gram-Schmidt pass with one re-orthogonalization follows.
    """
    x = sample_points(spec.m, spec.input_dim, rng)
    freqs = spec.frequencies()
    accepted, dirs, norms = [], [], []
    for j, f in enumerate(freqs):
        for _ in range(spec.trials):
            d = rng.normal(1.0, 1.0, size=spec.input_dim)
            if spec.unit_directions:
                d = d / np.linalg.norm(d)
            w = np.sin(2.0 * np.pi * f * (d @ x))
            nrm = float(np.linalg.norm(w))
            if nrm == 0.0:
                continue
            w = w / nrm
            if not accepted or max(abs(float(w @ a)) for a in accepted) < spec.threshold:
                accepted.append(w)
                dirs.append(d)
                norms.append(nrm)
                break
        else:
            raise SynthesisError(j + 1)
    w = np.column_stack(accepted)
    q1, r1 = _mgs(w)
    v, r2 = _mgs(q1)
    return SyntheticFunctions(x, v, freqs, np.array(dirs), np.array(norms), r2 @ r1)


def synth_dataset(spec: SyntheticSpec, rng, m_test=0, n_rows=None):
    """Train/test datasets ``A = Phi diag(sigma) V^T`` with canonical ``Phi``.

    Returns ``(train, test, functions)``; ``test`` is ``None`` when
    ``m_test == 0``. Branch inputs are the sample points; the test split
    evaluates the same orthogonalized functions at fresh points.
    """
    fn = synth_rsf(spec, rng)
    n = spec.n_modes if n_rows is None else n_rows
    if n < spec.n_modes:
        raise ValueError("n_rows must be >= n_modes")
    phi = np.eye(n)[:, : spec.n_modes]
    sigma = spec.singular_values()
    grid = interior_points(n)

    def make(points, v, role):
        return Dataset(
            a=(phi * sigma) @ v.T,
            p_hat=points,
            coeffs=np.zeros((0, points.shape[1])),
            grid=grid,
            sample_points=np.zeros(0),
            problem=None,
            role=role,
            solver_info={"kind": "synthetic", "alpha": spec.alpha, "beta": spec.beta, "f0": spec.f0},
        )

    train = make(fn.points, fn.v, "train")
    test = None
    if m_test > 0:
        pts = sample_points(m_test, spec.input_dim, rng)
        test = make(pts, fn.evaluate(pts), "test")
    return train, test, fn


def spearman(a, b) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


FREQ_COLUMNS = ["mode", "tv_k3", "le_k50", "proj_fourier", "dictated"]


def write_frequencies_csv(path, tv, le, proj, dictated=None) -> None:
    n = len(tv)
    lines = [",".join(FREQ_COLUMNS)]
    for i in range(n):
        vals = [tv[i], le[i], proj[i], None if dictated is None else dictated[i]]
        lines.append(",".join([str(i + 1)] + ["" if v is None or (isinstance(v, float) and math.isnan(v))
                                                else format(float(v), ".17g") for v in vals]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_frequencies_csv(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if lines[0].split(",") != FREQ_COLUMNS:
        raise ValueError(f"{path}: unexpected header")
    cols = {c: [] for c in FREQ_COLUMNS}
    for line in lines[1:]:
        for c, v in zip(FREQ_COLUMNS, line.split(",")):
            cols[c].append(int(v) if c == "mode" else (float(v) if v else float("nan")))
    return {c: np.array(v) for c, v in cols.items()}
