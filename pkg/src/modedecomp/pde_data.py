"""Training data for the three 1-D time-evolution problems.

Input functions are finite sine series ``p(x) = sum_i a_i sin(w_i x)`` with
``a_i ~ U(-1, 1)``. Each dataset column is one input function pushed through
the solution operator ``p -> u(., tau)`` and sampled on the solution grid.

* advection-diffusion, periodic on (0, 1): central differences + RK4
* KdV, periodic on (0, 1): central differences + RK4
* viscous Burgers, Dirichlet on (0, 1): sine-Galerkin pseudospectral + forward Euler

All columns of a dataset are integrated together as one ``n x m`` state.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ShapeError, SolverInstabilityError
from .linalg import pseudoinverse, read_matrix_csv, write_matrix_csv

AD_SPEED = 4.0 / (2.0 * math.pi)
AD_DIFFUSION = 0.01 / (4.0 * math.pi**2)
KDV_ADVECTION = 1.0 / (2.0 * math.pi)
KDV_DISPERSION = 0.01 / (8.0 * math.pi**3)
BURGERS_VISCOSITY = 0.01

# |z| on the real axis where classical RK4 loses stability is ~2.785; the
# imaginary-axis limit is 2*sqrt(2). The smaller one bounds both.
RK4_STABILITY_RADIUS = 2.78
STEP_SAFETY = 0.5
# max |symbol| of the 5-point central third-derivative stencil, times h^3
THIRD_DERIV_SYMBOL_MAX = 1.5 * math.sqrt(3.0)

KINDS = ("AD", "KdV", "Burgers")


@dataclass(frozen=True)
class InputSpec:
    """Distribution of input functions ``sum_i a_i sin(w_i x)``."""

    n_modes: int
    frequencies: tuple
    coeff_low: float = -1.0
    coeff_high: float = 1.0

    def __post_init__(self):
        freqs = tuple(float(w) for w in self.frequencies)
        object.__setattr__(self, "frequencies", freqs)
        if len(freqs) != self.n_modes:
            raise ValueError("need exactly one frequency per input mode")
        if any(w <= 0 for w in freqs) or len(set(freqs)) != len(freqs):
            raise ValueError("frequencies must be strictly positive and distinct")


@dataclass(frozen=True)
class ProblemSpec:
    kind: str
    tau: float
    grid_points: int
    input_dim: int
    n_modes: int
    spectral_basis: int = 100
    dt: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; expected one of {KINDS}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.grid_points < 2:
            raise ValueError("need at least 2 grid points")
        if self.input_dim < self.n_modes:
            raise ValueError("input_dim must be >= n_modes for lossless encoding")
        if self.kind == "AD" and self.input_dim < 2 * self.n_modes:
            raise ValueError("advection-diffusion inputs need input_dim >= 2 * n_modes")
        if self.kind == "Burgers" and self.spectral_basis < 1:
            raise ValueError("spectral_basis must be positive")

    def input_spec(self) -> InputSpec:
        base = math.pi if self.kind == "Burgers" else 2.0 * math.pi
        return InputSpec(self.n_modes, tuple(base * i for i in range(1, self.n_modes + 1)))


def default_problem(kind, tau=None, **overrides) -> ProblemSpec:
    """Problem with the reference-scale data parameters."""
    table = {
        "AD": dict(tau=0.5, grid_points=200, input_dim=200, n_modes=20),
        "KdV": dict(tau=0.2, grid_points=400, input_dim=400, n_modes=5),
        "Burgers": dict(tau=0.1, grid_points=200, input_dim=50, n_modes=5, dt=1e-5),
    }
    if kind not in table:
        raise ValueError(f"unknown problem kind {kind!r}")
    params = dict(table[kind])
    if tau is not None:
        params["tau"] = tau
    params.update(overrides)
    return ProblemSpec(kind=kind, **params)


@dataclass
class Dataset:
    """One split of a dataset: solutions, sampled inputs and coefficients."""

    a: np.ndarray
    p_hat: np.ndarray
    coeffs: np.ndarray
    grid: np.ndarray
    sample_points: np.ndarray
    problem: ProblemSpec | None
    seed: int | None = None
    role: str = "train"
    solver_info: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.a.shape[1]

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.a, self.p_hat, self.coeffs, self.grid):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
            h.update(str(arr.shape).encode())
        return h.hexdigest()[:16]


def solution_grid(problem: ProblemSpec) -> np.ndarray:
    n = problem.grid_points
    if problem.kind == "Burgers":
        return np.arange(1, n + 1) / (n + 1)
    return np.arange(n) / n


def interior_points(count) -> np.ndarray:
    return np.arange(1, count + 1) / (count + 1)


def sample_inputs(spec: InputSpec, m: int, rng) -> np.ndarray:
    """Coefficient matrix (L x m) with i.i.d. uniform entries."""
    if m < 0:
        raise ValueError("m must be non-negative")
    return rng.uniform(spec.coeff_low, spec.coeff_high, size=(spec.n_modes, m))


def sine_matrix(spec: InputSpec, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return np.sin(np.outer(points, np.asarray(spec.frequencies)))


def encode_inputs(coeffs, spec: InputSpec, sample_points=None) -> np.ndarray:
    """Sample the input functions at ``sample_points`` (default: j/(M+1))."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if sample_points is None:
        sample_points = interior_points(spec.n_modes)
    sample_points = np.asarray(sample_points, dtype=np.float64)
    if sample_points.size < spec.n_modes:
        raise ValueError(
            f"{sample_points.size} sample points cannot encode {spec.n_modes} modes losslessly"
        )
    return sine_matrix(spec, sample_points) @ coeffs


def decode_inputs(p_hat, spec: InputSpec, sample_points=None) -> np.ndarray:
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if sample_points is None:
        sample_points = interior_points(p_hat.shape[0])
    sample_points = np.asarray(sample_points, dtype=np.float64)
    if sample_points.size < spec.n_modes:
        raise ValueError(
            f"{sample_points.size} sample points cannot encode {spec.n_modes} modes losslessly"
        )
    psi = sine_matrix(spec, sample_points)
    return pseudoinverse(psi) @ p_hat


def _ddx(u, h):
    return (np.roll(u, -1, axis=0) - np.roll(u, 1, axis=0)) / (2.0 * h)


def _d2dx2(u, h):
    return (np.roll(u, -1, axis=0) - 2.0 * u + np.roll(u, 1, axis=0)) / (h * h)


def _d3dx3(u, h):
    return (
        -np.roll(u, 2, axis=0)
        + 2.0 * np.roll(u, 1, axis=0)
        - 2.0 * np.roll(u, -1, axis=0)
        + np.roll(u, -2, axis=0)
    ) / (2.0 * h**3)


def _rk4(rhs, u, dt, steps):
    # blow-up is detected explicitly below, so silence the overflow chatter
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            k1 = rhs(u)
            k2 = rhs(u + 0.5 * dt * k1)
            k3 = rhs(u + 0.5 * dt * k2)
            k4 = rhs(u + dt * k3)
            u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(u)):
                raise SolverInstabilityError(k + 1)
    return u


def _steps(tau, dt):
    steps = max(1, math.ceil(tau / dt - 1e-12))
    return steps, tau / steps


def ad_step_size(h):
    rho = AD_SPEED / h + 4.0 * AD_DIFFUSION / h**2
    return STEP_SAFETY * RK4_STABILITY_RADIUS / rho


def kdv_step_size(h, u_max):
    rho = KDV_ADVECTION * u_max / h + KDV_DISPERSION * THIRD_DERIV_SYMBOL_MAX / h**3
    return STEP_SAFETY * RK4_STABILITY_RADIUS / rho


def _solve_ad(problem, u0, h):
    def rhs(u):
        return -AD_SPEED * _ddx(u, h) + AD_DIFFUSION * _d2dx2(u, h)

    steps, dt = _steps(problem.tau, problem.dt or ad_step_size(h))
    return _rk4(rhs, u0, dt, steps), {"dt": dt, "steps": steps, "scheme": "central FD (2nd order) + RK4"}


def _solve_kdv(problem, u0, h):
    def rhs(u):
        # conservative form (u^2/2)_x keeps the grid sum of u invariant
        return -KDV_ADVECTION * _ddx(0.5 * u * u, h) - KDV_DISPERSION * _d3dx3(u, h)

    # the sup norm can grow while dispersive waves steepen; budget for 2x
    u_max = 2.0 * float(np.max(np.abs(u0), initial=0.0)) + 1e-12
    steps, dt = _steps(problem.tau, problem.dt or kdv_step_size(h, u_max))
    info = {"dt": dt, "steps": steps, "scheme": "central FD (2nd order d/dx, 5-point d3/dx3) + RK4"}
    return _rk4(rhs, u0, dt, steps), info


def _solve_burgers(problem, spec, coeffs, grid):
    k_modes = problem.spectral_basis
    wave = math.pi * np.arange(1, k_modes + 1)
    colloc = interior_points(k_modes)
    s_mat = np.sin(np.outer(colloc, wave))
    dx_mat = np.cos(np.outer(colloc, wave)) * wave
    # discrete sine orthogonality on j/(K+1): sum_j sin(k pi y_j) sin(l pi y_j) = (K+1)/2 delta_kl
    project = (2.0 / (k_modes + 1)) * s_mat.T
    c = project @ (sine_matrix(spec, colloc) @ coeffs)
    decay = BURGERS_VISCOSITY * wave**2

    steps, dt = _steps(problem.tau, problem.dt or 1e-5)
    damp = (1.0 - dt * decay)[:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            u = s_mat @ c
            ux = dx_mat @ c
            c = damp * c - dt * (project @ (u * ux))
            if not np.all(np.isfinite(c)):
                raise SolverInstabilityError(k + 1)
    out = np.sin(np.outer(grid, wave)) @ c
    info = {"dt": dt, "steps": steps, "scheme": f"sine-Galerkin pseudospectral ({k_modes} modes) + forward Euler"}
    return out, info


def solve(problem: ProblemSpec, input_coeffs, return_info=False):
    """Push input functions through the solution operator.

    Parameters
    ----------
    problem : ProblemSpec
    input_coeffs : array_like, shape (L,) or (L, m)
        Sine-series coefficients of the input functions.

    Returns
    -------
    ndarray, shape (n,) or (n, m)
        Solutions at time ``tau`` on :func:`solution_grid`.
    """
    coeffs = np.asarray(input_coeffs, dtype=np.float64)
    single = coeffs.ndim == 1
    if single:
        coeffs = coeffs[:, None]
    spec = problem.input_spec()
    if coeffs.shape[0] != spec.n_modes:
        raise ShapeError(f"expected {spec.n_modes} coefficients per input, got {coeffs.shape[0]}")
    grid = solution_grid(problem)
    if coeffs.shape[1] == 0:
        out, info = np.zeros((grid.size, 0)), {}
    elif problem.kind == "Burgers":
        out, info = _solve_burgers(problem, spec, coeffs, grid)
    else:
        u0 = sine_matrix(spec, grid) @ coeffs
        h = 1.0 / problem.grid_points
        if problem.kind == "AD":
            out, info = _solve_ad(problem, u0, h)
        else:
            out, info = _solve_kdv(problem, u0, h)
    if single:
        out = out[:, 0]
    return (out, info) if return_info else out


def analytic_ad(input_coeffs, tau, grid, frequencies=None) -> np.ndarray:
    """Exact advection-diffusion solution, one Fourier mode at a time.

    Mode ``sin(w x)`` decays by ``exp(-nu w^2 tau)`` and translates by
    ``c tau``; with ``w = 2 pi i`` the decay is ``exp(-0.01 i^2 tau)``.
    """
    coeffs = np.asarray(input_coeffs, dtype=np.float64)
    if frequencies is None:
        frequencies = 2.0 * math.pi * np.arange(1, coeffs.shape[0] + 1)
    w = np.asarray(frequencies, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    amp = np.exp(-AD_DIFFUSION * w**2 * tau)
    basis = np.sin(np.outer(grid - AD_SPEED * tau, w)) * amp
    return basis @ coeffs


def build_dataset(problem: ProblemSpec, m_train, m_test, seed) -> tuple[Dataset, Dataset]:
    """Independent train/test splits from disjoint RNG streams of ``seed``."""
    spec = problem.input_spec()
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    grid = solution_grid(problem)
    points = interior_points(problem.input_dim)
    out = []
    for role, m, rng in (("train", m_train, train_rng), ("test", m_test, test_rng)):
        coeffs = sample_inputs(spec, m, rng)
        a, info = solve(problem, coeffs, return_info=True)
        out.append(
            Dataset(
                a=a,
                p_hat=encode_inputs(coeffs, spec, points),
                coeffs=coeffs,
                grid=grid,
                sample_points=points,
                problem=problem,
                seed=seed,
                role=role,
                solver_info=info,
            )
        )
    return out[0], out[1]


def save_dataset(directory, ds: Dataset) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(directory / "A.csv", ds.a)
    write_matrix_csv(directory / "P.csv", ds.p_hat)
    write_matrix_csv(directory / "coeffs.csv", ds.coeffs)
    write_matrix_csv(directory / "grid.csv", ds.grid[:, None])
    write_matrix_csv(directory / "sample_points.csv", ds.sample_points[:, None])
    meta = {
        "problem": asdict(ds.problem) if ds.problem is not None else None,
        "seed": ds.seed,
        "role": ds.role,
        "m": ds.m,
        "solver": ds.solver_info,
        "hash": ds.fingerprint(),
    }
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    with open(directory / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    problem = ProblemSpec(**meta["problem"]) if meta.get("problem") else None
    ds = Dataset(
        a=read_matrix_csv(directory / "A.csv"),
        p_hat=read_matrix_csv(directory / "P.csv"),
        coeffs=read_matrix_csv(directory / "coeffs.csv"),
        grid=read_matrix_csv(directory / "grid.csv")[:, 0],
        sample_points=read_matrix_csv(directory / "sample_points.csv")[:, 0],
        problem=problem,
        seed=meta.get("seed"),
        role=meta.get("role", "train"),
        solver_info=meta.get("solver", {}),
    )
    if meta.get("hash") and meta["hash"] != ds.fingerprint():
        raise ValueError(f"{os.fspath(directory)}: data does not match recorded hash")
    return ds


def with_problem(problem: ProblemSpec, **changes) -> ProblemSpec:
    return replace(problem, **changes)
