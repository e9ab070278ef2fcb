"""Update-based mode coupling for the SVD-trunk model.

One GD step with rate ``alpha`` changes the loss ``L = (1/(n m)) sum_i
sigma_i^2 L_i`` by, to first order, ``-alpha ||grad L||^2 = sum_ij S_ij``
with::

    S_ij = -(alpha / (n^2 m^2)) sigma_i^2 sigma_j^2 <grad L_i, grad L_j>

The diagonal sum ``d`` is the part of the change each mode causes on
itself; the off-diagonal sum ``omega`` is cross-mode interaction and
``gamma = omega / (d + omega)`` its relative strength.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .deeponet import Model, branch_backward, branch_forward, test_targets
from .linalg import read_matrix_csv, write_matrix_csv
from .errors import NonFiniteError, ShapeError, TrainingDivergedError


def _flatten(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def per_mode_gradients(model: Model, dataset, role="train", m_tr=None) -> np.ndarray:
    """Gradients of the individual mode losses, one flattened row per mode.

    ``role="train"`` differentiates ``L_i = ||b_i - v_i||^2``; ``role="test"``
    differentiates ``L_i,te = (m_tr/m_te) ||b_i,te - w_i||^2``. Rows follow
    ``model.arrays()`` order, row-major within each array.
    """
    if not model.modified:
        raise ValueError("per-mode gradients need the SVD-scaled trunk")
    if role == "train":
        target, factor = model.v1.T, 1.0
    elif role == "test":
        if m_tr is None:
            raise ValueError("test role needs m_tr")
        target = test_targets(model, dataset)
        factor = m_tr / dataset.a.shape[1]
    else:
        raise ValueError(f"unknown role {role!r}")
    bt, caches = branch_forward(model.branch, dataset.p_hat)
    if bt.shape != target.shape:
        raise ShapeError(f"branch output {bt.shape} does not match targets {target.shape}")
    resid = 2.0 * factor * (bt - target)
    rows = []
    for i in range(model.n_basis):
        d_out = np.zeros_like(resid)
        d_out[i] = resid[i]
        rows.append(_flatten(branch_backward(model.branch, caches, d_out)))
    grads = np.vstack(rows)
    if not np.all(np.isfinite(grads)):
        bad = sorted({int(i) for i in np.argwhere(~np.isfinite(grads))[:, 0]})
        raise NonFiniteError(f"non-finite gradients for modes {bad}")
    return grads


@dataclass(frozen=True)
class CouplingReport:
    s: np.ndarray
    d: float
    omega: float
    gamma: float | None  # None when d + omega == 0
    alpha: float
    epoch: int | None = None
    taylor_pred: float = 0.0
    measured_dl: float | None = None

    @property
    def total(self):
        return float(np.sum(self.s))


def coupling_matrix(grads_eval, grads_train, sigmas, alpha, n, m_tr, epoch=None) -> CouplingReport:
    """Coupling matrix from per-mode gradients (rows) via one Gram product."""
    ge = np.asarray(grads_eval, dtype=np.float64)
    gt = np.asarray(grads_train, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if ge.ndim == 1:
        ge = ge[None, :]
    if gt.ndim == 1:
        gt = gt[None, :]
    if ge.shape != gt.shape or ge.shape[0] != sigmas.size:
        raise ShapeError(f"gradient stacks {ge.shape}, {gt.shape} and {sigmas.size} singular values disagree")
    w = sigmas**2
    s = -(alpha / (n * n * m_tr * m_tr)) * (w[:, None] * (ge @ gt.T) * w[None, :])
    d = float(np.trace(s))
    omega = float(np.sum(s) - d) if s.shape[0] > 1 else 0.0
    gamma = omega / (d + omega) if d + omega != 0 else None
    return CouplingReport(s=s, d=d, omega=omega, gamma=gamma, alpha=float(alpha), epoch=epoch, taylor_pred=d + omega)


def model_coupling(model: Model, train_set, alpha, epoch=None) -> CouplingReport:
    g = per_mode_gradients(model, train_set, "train")
    return coupling_matrix(g, g, model.sigma1, alpha, train_set.a.shape[0], train_set.a.shape[1], epoch)


@dataclass(frozen=True)
class TaylorResult:
    predicted: float
    measured: float

    @property
    def rel_gap(self):
        if self.measured == 0:
            return 0.0 if self.predicted == 0 else float("inf")
        return abs(self.predicted - self.measured) / abs(self.measured)


def taylor_step(loss_fn, grad_fn, theta, alpha) -> TaylorResult:
    """First-order prediction ``-alpha ||g||^2`` against one real GD step."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(grad_fn(theta), dtype=np.float64)
    before = float(loss_fn(theta))
    after = float(loss_fn(theta - alpha * g))
    if not np.isfinite(after):
        raise TrainingDivergedError(f"GD step with alpha={alpha} produced a non-finite loss")
    return TaylorResult(predicted=-alpha * float(g @ g), measured=after - before)


def _modified_loss(model: Model, arrays, train_set):
    m = model.with_arrays(arrays)
    bt, _ = branch_forward(m.branch, train_set.p_hat)
    r = bt - model.v1.T
    return float(np.sum(model.sigma1**2 * np.einsum("ij,ij->i", r, r))) / (train_set.a.size)


def taylor_check(model: Model, train_set, alpha) -> tuple[TaylorResult, CouplingReport]:
    """Coupling-predicted ``d + omega`` against the measured loss change of one GD step.

    The step is taken on a copy; ``model`` is not modified.
    """
    rep = model_coupling(model, train_set, alpha)
    n, m = train_set.a.shape
    full_grad = (model.sigma1**2) @ per_mode_gradients(model, train_set) / (n * m)
    arrays = model.arrays()
    before = _modified_loss(model, arrays, train_set)
    stepped, pos = [], 0
    for a in arrays:
        stepped.append(a - alpha * full_grad[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    after = _modified_loss(model, stepped, train_set)
    if not np.isfinite(after):
        raise TrainingDivergedError(f"GD step with alpha={alpha} produced a non-finite loss")
    return TaylorResult(predicted=rep.total, measured=after - before), rep


class CouplingRecorder:
    """Training observer sampling the coupling report every ``every`` epochs.

    The rate used for ``S`` is the one of the upcoming update. Call
    :meth:`fill_measured` with the finished history to attach the measured
    loss changes.
    """

    def __init__(self, train_set, every=10):
        if every < 1:
            raise ValueError("every must be >= 1")
        self.train_set = train_set
        self.every = every
        self.reports = []

    def __call__(self, epoch, model, lr_next):
        if epoch % self.every == 0:
            self.reports.append(model_coupling(model, self.train_set, lr_next, epoch))

    def fill_measured(self, history):
        index = {e: i for i, e in enumerate(history.epoch)}
        out = []
        for r in self.reports:
            i = index.get(r.epoch)
            measured = None
            if i is not None and i + 1 < len(history.epoch):
                measured = history.train_loss[i + 1] - history.train_loss[i]
            out.append(CouplingReport(r.s, r.d, r.omega, r.gamma, r.alpha, r.epoch, r.taylor_pred, measured))
        self.reports = out
        return out


COUPLING_COLUMNS = ["epoch", "d", "omega", "gamma", "taylor_pred", "measured_dl", "alpha"]
UNDEFINED = "undefined"


def _fmt(x):
    return "" if x is None else format(float(x), ".17g")


def write_coupling_csv(path, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COUPLING_COLUMNS)
        for r in reports:
            gamma = UNDEFINED if r.gamma is None else _fmt(r.gamma)
            w.writerow([r.epoch, _fmt(r.d), _fmt(r.omega), gamma, _fmt(r.taylor_pred), _fmt(r.measured_dl), _fmt(r.alpha)])


def read_coupling_csv(path) -> list:
    """Rows as dicts; ``gamma`` is ``None`` when undefined."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COUPLING_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({
                "epoch": int(r["epoch"]) if r["epoch"] else None,
                "d": float(r["d"]),
                "omega": float(r["omega"]),
                "gamma": None if r["gamma"] == UNDEFINED else float(r["gamma"]),
                "taylor_pred": float(r["taylor_pred"]),
                "measured_dl": float(r["measured_dl"]) if r["measured_dl"] else None,
                "alpha": float(r["alpha"]),
            })
    return rows


def write_s_matrix(directory, report) -> str:
    """Write ``S_epoch<k>.csv`` for one sampled report; returns the path."""
    if report.epoch is None:
        raise ValueError("report has no epoch")
    path = f"{directory}/S_epoch{report.epoch}.csv"
    write_matrix_csv(path, report.s)
    return path


def read_s_matrix(path) -> np.ndarray:
    return read_matrix_csv(path)


def mean_neg_gamma(reports) -> float:
    vals = [-r.gamma for r in reports if r.gamma is not None]
    return float(np.mean(vals)) if vals else float("nan")
