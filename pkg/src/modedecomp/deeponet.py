"""DeepONet models: trunk bases, stacked/unstacked branches and full-batch training.

A model predicts ``A_hat = T B^T`` where ``T`` (n x N) holds the trunk basis
on the solution grid and ``B`` (m x N) holds the branch outputs for ``m``
input functions. The branch is stored transposed, ``B^T`` (N x m), because
networks map columns to columns.

Two training regimes are supported:

* the SVD-trunk ("modified") model with ``T = Phi_1 Sigma_1`` trains only the
  branch, on the branch-error loss ``(1/(n m)) sum_i sigma_i^2 ||b_i - v_i||^2``;
* every other model trains on the pointwise MSE ``(1/(n m)) ||A - T B^T||^2``,
  jointly with the trunk network when the trunk is learned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .errdecomp import mode_losses_test, mode_losses_train, test_coefficients
from .errors import ShapeError
from .linalg import SvdSplit, read_matrix_csv, svd, truncate, write_matrix_csv
from .optim import OptimizerConfig, init_state, lr_at, mode_weights, step

TRUNK_KINDS = ("learned", "svd_scaled", "svd_unscaled", "legendre", "chebyshev", "cosine")
SVD_KINDS = ("svd_scaled", "svd_unscaled")
DIVERGENCE_LOSS = 1e12


def _legendre(y, n_basis):
    """``P_0..P_{N-1}`` at ``y`` via ``(k+1) P_{k+1} = (2k+1) y P_k - k P_{k-1}``."""
    out = np.empty((y.size, n_basis))
    out[:, 0] = 1.0
    if n_basis > 1:
        out[:, 1] = y
    for k in range(1, n_basis - 1):
        out[:, k + 1] = ((2 * k + 1) * y * out[:, k] - k * out[:, k - 1]) / (k + 1)
    return out


def _chebyshev(y, n_basis):
    """``T_0..T_{N-1}`` at ``y`` via ``T_{k+1} = 2 y T_k - T_{k-1}``."""
    out = np.empty((y.size, n_basis))
    out[:, 0] = 1.0
    if n_basis > 1:
        out[:, 1] = y
    for k in range(1, n_basis - 1):
        out[:, k + 1] = 2.0 * y * out[:, k] - out[:, k - 1]
    return out


def trunk_matrix(kind, grid, train_svd: SvdSplit | None, n_basis) -> np.ndarray:
    """Fixed trunk basis evaluated on ``grid``.

    Parameters
    ----------
    kind : str
        One of ``svd_scaled``, ``svd_unscaled``, ``legendre``, ``chebyshev``,
        ``cosine``. Polynomials use the shifted argument ``2x - 1``; the
        cosine basis is ``cos((k-1) pi x)``. Columns are not normalized.
    grid : array_like, shape (n,)
    train_svd : SvdSplit or None
        Required for the SVD kinds; must hold at least ``n_basis`` triples.
    n_basis : int
    """
    grid = np.asarray(grid, dtype=np.float64)
    if n_basis < 1:
        raise ValueError("n_basis must be >= 1")
    if kind in SVD_KINDS:
        if train_svd is None:
            raise ValueError(f"{kind} trunk needs the training SVD")
        if n_basis > train_svd.n_keep:
            raise ValueError(f"n_basis={n_basis} exceeds the {train_svd.n_keep} available singular triples")
        phi = train_svd.phi1[:, :n_basis]
        if phi.shape[0] != grid.size:
            raise ShapeError(f"SVD trunk has {phi.shape[0]} rows, grid has {grid.size} points")
        return phi * train_svd.sigma1[:n_basis] if kind == "svd_scaled" else phi.copy()
    if np.any(grid < 0) or np.any(grid > 1):
        raise ValueError("grid must lie in [0, 1]")
    if kind == "legendre":
        return _legendre(2.0 * grid - 1.0, n_basis)
    if kind == "chebyshev":
        return _chebyshev(2.0 * grid - 1.0, n_basis)
    if kind == "cosine":
        return np.cos(np.outer(grid, np.pi * np.arange(n_basis)))
    raise ValueError(f"unknown fixed trunk kind {kind!r}")


@dataclass(frozen=True, eq=False)
class Branch:
    """``stacked=False``: one MLP with N outputs. ``stacked=True``: N MLPs with one output each."""

    nets: tuple
    stacked: bool

    @property
    def n_out(self):
        return len(self.nets) if self.stacked else self.nets[0].shape.output_dim

    @property
    def input_dim(self):
        return self.nets[0].shape.input_dim

    def arrays(self):
        return [a for net in self.nets for a in net.arrays()]

    def with_arrays(self, arrays):
        nets, pos = [], 0
        for net in self.nets:
            k = len(net.arrays())
            nets.append(nn.MlpParams.from_arrays(net.shape, arrays[pos : pos + k]))
            pos += k
        return Branch(tuple(nets), self.stacked)


def make_branch(input_dim, width, depth, n_out, stacked, rng) -> Branch:
    if stacked:
        shape = nn.MlpShape(input_dim, width, depth, 1)
        return Branch(tuple(nn.init(shape, rng) for _ in range(n_out)), True)
    return Branch((nn.init(nn.MlpShape(input_dim, width, depth, n_out), rng),), False)


def branch_forward(branch: Branch, p_hat):
    """Branch outputs ``B^T`` (N x m) and the caches for :func:`branch_backward`."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p_hat.ndim != 2 or p_hat.shape[0] != branch.input_dim:
        raise ShapeError(f"branch input must have shape ({branch.input_dim}, m), got {p_hat.shape}")
    outs, caches = zip(*(nn.forward(net, p_hat) for net in branch.nets))
    return np.vstack(outs), caches


def branch_backward(branch: Branch, caches, d_out) -> list:
    """Gradient arrays (same order as ``branch.arrays()``) for upstream ``d_out`` (N x m)."""
    if branch.stacked:
        grads = [nn.backward(net, c, d_out[i : i + 1]) for i, (net, c) in enumerate(zip(branch.nets, caches))]
    else:
        grads = [nn.backward(branch.nets[0], caches[0], d_out)]
    return [a for g in grads for a in g.arrays()]


@dataclass(frozen=True, eq=False)
class Model:
    """A DeepONet bound to the grid and fingerprint of its training set.

    ``trunk_fixed`` holds ``T`` for fixed bases; ``trunk_net`` is the trunk MLP
    for learned trunks (input: the grid coordinate, output: N basis values).
    ``sigma1``, ``phi1`` and ``v1`` are kept for SVD trunks.
    """

    trunk_kind: str
    n_basis: int
    branch: Branch
    grid: np.ndarray
    trunk_fixed: np.ndarray | None = None
    trunk_net: nn.MlpParams | None = None
    sigma1: np.ndarray | None = None
    phi1: np.ndarray | None = None
    v1: np.ndarray | None = None
    fingerprint: str = ""

    @property
    def modified(self):
        return self.trunk_kind == "svd_scaled"

    def arrays(self):
        out = self.branch.arrays()
        if self.trunk_net is not None:
            out += self.trunk_net.arrays()
        return out

    def with_arrays(self, arrays):
        k = len(self.branch.arrays())
        branch = self.branch.with_arrays(arrays[:k])
        trunk_net = None
        if self.trunk_net is not None:
            trunk_net = nn.MlpParams.from_arrays(self.trunk_net.shape, arrays[k:])
        return replace(self, branch=branch, trunk_net=trunk_net)


def trunk(model: Model) -> np.ndarray:
    """Trunk matrix ``T`` (n x N) on the bound grid."""
    if model.trunk_net is not None:
        return nn.predict(model.trunk_net, model.grid[None, :]).T
    return model.trunk_fixed


def predict(model: Model, p_hat) -> np.ndarray:
    """``A_hat = T B^T`` for the input columns ``p_hat`` (M x m)."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    single = p_hat.ndim == 1
    if single:
        p_hat = p_hat[:, None]
    bt, _ = branch_forward(model.branch, p_hat)
    out = trunk(model) @ bt
    return out[:, 0] if single else out


def build_model(kind, train_set, n_basis, width, depth, rng, stacked=False, trunk_shape=None) -> Model:
    """Fresh model for ``train_set`` (a :class:`pde_data.Dataset`-like object).

    ``trunk_shape`` gives ``(width, depth)`` of the trunk MLP for ``kind="learned"``.
    """
    if kind not in TRUNK_KINDS:
        raise ValueError(f"unknown trunk kind {kind!r}; expected one of {TRUNK_KINDS}")
    grid = np.asarray(train_set.grid, dtype=np.float64)
    fields = {}
    if kind == "learned":
        tw, td = trunk_shape or (width, depth)
        fields["trunk_net"] = nn.init(nn.MlpShape(1, tw, td, n_basis), rng)
    else:
        split = None
        if kind in SVD_KINDS:
            f = svd(train_set.a)
            if n_basis > f.s.size:
                raise ValueError(f"n_basis={n_basis} exceeds the {f.s.size} available singular triples")
            split = truncate(f, n_basis)
            fields.update(sigma1=split.sigma1, phi1=split.phi1, v1=split.v1)
        fields["trunk_fixed"] = trunk_matrix(kind, grid, split, n_basis)
    branch = make_branch(train_set.p_hat.shape[0], width, depth, n_basis, stacked, rng)
    fingerprint = train_set.fingerprint() if hasattr(train_set, "fingerprint") else ""
    return Model(kind, n_basis, branch, grid, fingerprint=fingerprint, **fields)


def match_unstacked_width(w_stacked, n_modes, depth, input_dim) -> int:
    """Width of the unstacked branch whose parameter count best matches N stacked nets.

    Ties go to the smaller width.
    """
    if min(w_stacked, n_modes, depth, input_dim) < 1:
        raise ValueError("all arguments must be >= 1")
    target = n_modes * nn.param_count(nn.MlpShape(input_dim, w_stacked, depth, 1))
    best_w, best_gap = 1, None
    w = 1
    while True:
        count = nn.param_count(nn.MlpShape(input_dim, w, depth, n_modes))
        gap = abs(count - target)
        if best_gap is None or gap < best_gap:
            best_w, best_gap = w, gap
        if count > target:  # counts increase with w
            return best_w
        w += 1


# ---------------------------------------------------------------- losses


@dataclass
class LossEval:
    """Loss at the current parameters plus what the backward pass needs."""

    loss: float
    bt: np.ndarray
    caches: tuple
    resid: np.ndarray  # B^T - V_1^T (modified) or T B^T - A (otherwise)
    trunk_cache: object = None
    t: np.ndarray | None = None


def evaluate(model: Model, p_hat, target, n_points=None) -> LossEval:
    """Loss of ``model`` on inputs ``p_hat``.

    ``target`` is ``V_1^T``-like coefficients (N x m) for the modified model
    and the solution matrix ``A`` (n x m) otherwise.
    """
    bt, caches = branch_forward(model.branch, p_hat)
    m = bt.shape[1]
    if model.modified:
        n = n_points if n_points is not None else model.grid.size
        resid = bt - target
        per_mode = np.einsum("ij,ij->i", resid, resid)
        loss = float(np.sum(model.sigma1**2 * per_mode)) / (n * m)
        return LossEval(loss, bt, caches, resid)
    trunk_cache = None
    if model.trunk_net is not None:
        out, trunk_cache = nn.forward(model.trunk_net, model.grid[None, :])
        t = out.T
    else:
        t = model.trunk_fixed
    resid = t @ bt - target
    loss = float(np.sum(resid * resid)) / (resid.shape[0] * m)
    return LossEval(loss, bt, caches, resid, trunk_cache, t)


def gradient(model: Model, ev: LossEval, weights=None, n_points=None) -> list:
    """Gradient arrays of the evaluated loss, in ``model.arrays()`` order.

    For the modified model ``weights`` are the per-mode weights (default
    ``sigma_i^2``); the loss is ``(1/(n m)) sum_i w_i ||b_i - v_i||^2``.
    """
    m = ev.bt.shape[1]
    if model.modified:
        n = n_points if n_points is not None else model.grid.size
        w = model.sigma1**2 if weights is None else np.asarray(weights, dtype=np.float64)
        d_bt = (2.0 / (n * m)) * w[:, None] * ev.resid
        return branch_backward(model.branch, ev.caches, d_bt)
    if weights is not None:
        raise ValueError("mode weights need the SVD-scaled trunk")
    n = ev.resid.shape[0]
    d_pred = (2.0 / (n * m)) * ev.resid
    grads = branch_backward(model.branch, ev.caches, ev.t.T @ d_pred)
    if model.trunk_net is not None:
        d_t = d_pred @ ev.bt.T  # n x N
        grads += nn.backward(model.trunk_net, ev.trunk_cache, d_t.T).arrays()
    return grads


def train_targets(model: Model, train_set):
    return model.v1.T if model.modified else train_set.a


def test_targets(model: Model, test_set):
    if model.modified:
        return test_coefficients(model.phi1, model.sigma1, test_set.a).T
    return test_set.a


test_targets.__test__ = False  # not a pytest test despite the name


# ---------------------------------------------------------------- training


@dataclass
class TrainHistory:
    """Per-epoch record; epoch 0 is the initial model, epoch t follows update t."""

    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    mode_epochs: list = field(default_factory=list)
    mode_reports: list = field(default_factory=list)
    diverged: bool = False
    diverged_epoch: int | None = None

    def record(self, epoch, train_loss, test_loss, lr):
        if self.epoch and epoch <= self.epoch[-1]:
            raise ValueError("epochs must increase")
        self.epoch.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.test_loss.append(float(test_loss))
        self.lr.append(float(lr))

    def final_modes(self):
        return self.mode_reports[-1] if self.mode_reports else None


HISTORY_COLUMNS = ["epoch", "train_loss", "test_loss", "lr"]


def write_history_csv(path, history: TrainHistory) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in zip(history.epoch, history.train_loss, history.test_loss, history.lr):
        lines.append(",".join([str(row[0])] + [format(x, ".17g") for x in row[1:]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_history_csv(path) -> TrainHistory:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split(",") != HISTORY_COLUMNS:
        raise ValueError(f"{path}: unexpected header")
    h = TrainHistory()
    for line in lines[1:]:
        e, tr, te, lr = line.split(",")
        h.record(int(e), float(tr), float(te), float(lr))
    return h


def mode_report(model: Model, bt_train, bt_test, test_coeffs, m_tr):
    """Per-mode train (and test) losses of a modified model."""
    rep = mode_losses_train(bt_train.T, model.v1, model.sigma1)
    if bt_test is not None and bt_test.shape[1] > 0:
        rep = rep.merged(mode_losses_test(bt_test.T, test_coeffs.T, m_tr, bt_test.shape[1], model.sigma1))
    return rep


def train(model: Model, train_set, test_set, config: OptimizerConfig, e=0.0, epochs=0, rng=None,
          mode_every=0, observer=None):
    """Full-batch training.

    Parameters
    ----------
    model, train_set, test_set
        ``test_set`` may be ``None`` or empty; test losses are then NaN.
    config : OptimizerConfig
    e : float
        Reweight exponent; mode weights are ``sigma_i^(2+2e)``. Only the
        modified model supports ``e != 0``. Under GD the rate is also scaled
        by ``sigma_1^(-2e)``.
    epochs : int
    rng : numpy Generator, unused
        Accepted for interface symmetry; training is deterministic.
    mode_every : int
        Record per-mode losses every ``mode_every`` epochs (0: final only).
    observer : callable, optional
        ``observer(epoch, model, lr_next)`` called before each update.

    Returns
    -------
    (Model, TrainHistory)
        On divergence (loss above 1e12 or non-finite) training stops early,
        ``history.diverged`` is set and the last finite model is returned.
    """
    del rng
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if e != 0 and not model.modified:
        raise ValueError("reweighting needs the SVD-scaled trunk")
    n = train_set.a.shape[0]
    m_tr = train_set.a.shape[1]
    target_tr = train_targets(model, train_set)
    has_test = test_set is not None and test_set.a.shape[1] > 0
    target_te = test_targets(model, test_set) if has_test else None

    weights, lr_scale = None, 1.0
    if model.modified:
        weights, scale = mode_weights(model.sigma1, e)
        if config.kind == "GD":
            lr_scale = scale

    history = TrainHistory()
    state = init_state(config, model.arrays())
    last_finite = model

    def test_eval(mdl):
        if not has_test:
            return float("nan"), None
        ev = evaluate(mdl, test_set.p_hat, target_te, n_points=n)
        return ev.loss, ev.bt

    for t in range(epochs + 1):
        ev = evaluate(model, train_set.p_hat, target_tr, n_points=n)
        te_loss, bt_te = test_eval(model)
        lr_now = lr_at(max(t, 1), config.alpha1) * lr_scale
        if not np.isfinite(ev.loss) or ev.loss > DIVERGENCE_LOSS:
            history.diverged, history.diverged_epoch = True, t
            model = last_finite
            break
        history.record(t, ev.loss, te_loss, lr_now)
        last = t == epochs
        if model.modified and (last or (mode_every and t % mode_every == 0)):
            history.mode_epochs.append(t)
            history.mode_reports.append(mode_report(model, ev.bt, bt_te, target_te, m_tr))
        if last:
            break
        lr_next = lr_at(t + 1, config.alpha1) * lr_scale
        if observer is not None:
            observer(t, model, lr_next)
        grads = gradient(model, ev, weights=weights if model.modified else None, n_points=n)
        if not all(np.all(np.isfinite(g)) for g in grads):
            history.diverged, history.diverged_epoch = True, t
            break
        state, new_arrays = step(state, model.arrays(), grads, config, t=t + 1, lr_scale=lr_scale)
        last_finite, model = model, model.with_arrays(new_arrays)
    return model, history


# ---------------------------------------------------------------- checkpoints


def save_model(directory, model: Model) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "trunk_kind": model.trunk_kind,
        "n_basis": model.n_basis,
        "stacked": model.branch.stacked,
        "n_branch_nets": len(model.branch.nets),
        "fingerprint": model.fingerprint,
        "sigma1": None if model.sigma1 is None else [float(s) for s in model.sigma1],
    }
    write_matrix_csv(directory / "grid.csv", model.grid[:, None])
    if model.trunk_net is not None:
        nn.save_checkpoint(directory / "trunk", model.trunk_net)
    else:
        write_matrix_csv(directory / "trunk.csv", model.trunk_fixed)
    if model.v1 is not None:
        write_matrix_csv(directory / "v1.csv", model.v1)
    if model.phi1 is not None:
        write_matrix_csv(directory / "phi1.csv", model.phi1)
    for i, net in enumerate(model.branch.nets):
        nn.save_checkpoint(directory / f"branch_{i}", net)
    (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_model(directory) -> Model:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    nets = tuple(nn.load_checkpoint(directory / f"branch_{i}") for i in range(meta["n_branch_nets"]))
    fields = {}
    if meta["trunk_kind"] == "learned":
        fields["trunk_net"] = nn.load_checkpoint(directory / "trunk")
    else:
        fields["trunk_fixed"] = read_matrix_csv(directory / "trunk.csv")
    if meta["sigma1"] is not None:
        sigma1 = np.array(meta["sigma1"])
        fields["sigma1"] = sigma1
        fields["phi1"] = read_matrix_csv(directory / "phi1.csv")
        if (directory / "v1.csv").exists():
            fields["v1"] = read_matrix_csv(directory / "v1.csv")
    return Model(
        meta["trunk_kind"],
        meta["n_basis"],
        Branch(nets, meta["stacked"]),
        read_matrix_csv(directory / "grid.csv")[:, 0],
        fingerprint=meta["fingerprint"],
        **fields,
    )
