"""Experiment configuration, single runs, sweeps and report files.

A run builds (or loads) a dataset, trains one model and writes
``report.json``, ``history.csv``, ``modes.csv`` and optionally
``coupling.csv`` into its output directory. Sweeps compose runs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coupling as cpl
from . import deeponet as dn
from . import errdecomp as ed
from . import pde_data as pdd
from . import spectral as sp
from .errors import ConfigError
from .linalg import svd, truncate
from .nn import MlpShape, param_count
from .optim import OptimizerConfig, lr_at

SCHEMA_VERSION = 1
OUT_ENV = "MODEDECOMP_OUT"
PROBLEMS = ("AD", "KdV", "Burgers", "synthetic")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    name: str = "run"
    problem: str = "KdV"
    tau: float | None = None
    grid_points: int | None = None
    input_dim: int | None = None
    m_train: int = 120
    m_test: int = 30
    n_basis: int = 20
    trunk: str = "svd_scaled"
    width: int = 64
    depth: int = 5
    stacked: bool = False
    trunk_width: int | None = None
    trunk_depth: int | None = None
    optimizer: str = "Adam"
    alpha1: float = 1e-4
    e: float = 0.0
    epochs: int = 800
    mode_every: int = 0
    coupling_every: int = 0
    data_dir: str | None = None
    synth_alpha: float = 0.2
    synth_beta: float = -0.01
    synth_f0: float = 2.0
    n_basis_list: tuple = ()
    trunk_list: tuple = ()
    e_list: tuple = ()
    optimizer_list: tuple = ()
    width_list: tuple = ()
    seed_list: tuple = ()
    workers: int = 1

    def __post_init__(self):
        for name in ("n_basis_list", "trunk_list", "e_list", "optimizer_list", "width_list", "seed_list"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        checks = [
            ("seed", isinstance(self.seed, int) and not isinstance(self.seed, bool) and self.seed >= 0,
             "must be a non-negative integer"),
            ("problem", self.problem in PROBLEMS, f"must be one of {PROBLEMS}"),
            ("trunk", self.trunk in dn.TRUNK_KINDS, f"must be one of {dn.TRUNK_KINDS}"),
            ("optimizer", self.optimizer in ("GD", "Adam", "AdaGrad"), "must be GD, Adam or AdaGrad"),
            ("alpha1", self.alpha1 > 0, "must be positive"),
            ("epochs", self.epochs >= 0, "must be non-negative"),
            ("m_train", self.m_train >= 1, "must be >= 1"),
            ("m_test", self.m_test >= 0, "must be >= 0"),
            ("n_basis", self.n_basis >= 1, "must be >= 1"),
            ("width", self.width >= 1, "must be >= 1"),
            ("depth", self.depth >= 1, "must be >= 1"),
            ("workers", self.workers >= 1, "must be >= 1"),
            ("mode_every", self.mode_every >= 0, "must be >= 0"),
            ("coupling_every", self.coupling_every >= 0, "must be >= 0"),
            ("tau", self.tau is None or self.tau > 0, "must be positive"),
            ("trunk_list", all(t in dn.TRUNK_KINDS for t in self.trunk_list), "unknown trunk kind"),
            ("e", self.e == 0 or self.trunk == "svd_scaled", "reweighting needs trunk svd_scaled"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, msg)
        if self.data_dir is not None and not (Path(self.data_dir) / "train" / "meta.json").exists():
            raise ConfigError("data_dir", f"no dataset found at {self.data_dir}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(k, "unknown field")
        if "seed" not in d:
            raise ConfigError("seed", "is mandatory")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<json>", str(exc)) from None
        return cls.from_dict(data)

    def replace(self, **changes):
        d = self.to_dict()
        for k in changes:
            if k not in d:
                raise ConfigError(k, "unknown field")
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    def digest(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def _preset_table():
    desk = dict(m_train=120, m_test=30, n_basis=20, width=64, depth=5, epochs=800)
    full_kdv = dict(problem="KdV", tau=0.2, m_train=900, m_test=100, n_basis=50, depth=5, epochs=4000)
    return {
        "desk-kdv": dict(desk, problem="KdV", tau=0.2, grid_points=100, input_dim=100),
        "desk-ad": dict(desk, problem="AD", tau=0.5, grid_points=100, input_dim=40, n_basis=20),
        "desk-burgers": dict(desk, problem="Burgers", tau=0.1, grid_points=100, input_dim=50, n_basis=20),
        "desk-synth": dict(problem="synthetic", n_basis=5, m_train=300, m_test=100, width=50, depth=5,
                           optimizer="Adam", alpha1=2e-3, epochs=2000),
        # reference-scale settings, one per figure family
        "full-bases": dict(problem="AD", tau=0.5, m_train=900, m_test=100, width=100, depth=5,
                            optimizer="Adam", alpha1=2e-3, epochs=5000,
                            trunk_list=["svd_scaled", "legendre", "chebyshev", "cosine", "learned"],
                            n_basis_list=[5, 10, 20, 40, 60, 80, 100]),
        "full-gd": dict(full_kdv, optimizer="GD", alpha1=1e-4, width=335),
        "full-adam": dict(full_kdv, optimizer="Adam", alpha1=1e-4, width=335),
        "full-adagrad": dict(full_kdv, optimizer="AdaGrad", alpha1=1e-4, width=335),
        "full-reweight-gd": dict(full_kdv, optimizer="GD", alpha1=1e-4, width=335, e_list=[-1.0, -0.5, 0.0, 0.5]),
        "full-reweight-adam": dict(full_kdv, optimizer="Adam", alpha1=1e-4, width=335, e_list=[-1.0, -0.5, 0.0]),
        "full-synth": dict(problem="synthetic", n_basis=5, m_train=300, m_test=100, width=50, depth=5,
                            optimizer="Adam", alpha1=2e-3, epochs=2000),
        "full-stacked": dict(full_kdv, optimizer="Adam", alpha1=1e-4, width=42),
        "full-coupling": dict(full_kdv, optimizer="GD", alpha1=1e-4, width=50, coupling_every=10,
                               width_list=[50, 100, 220, 335, 495]),
        "full-spectral-kdv": dict(full_kdv, optimizer="Adam", alpha1=1e-4, width=335),
    }


PRESETS = _preset_table()


def preset(name, seed=0, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = dict(PRESETS[name], seed=seed, name=name)
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------- data


def problem_spec(cfg: ExperimentConfig) -> pdd.ProblemSpec:
    overrides = {}
    if cfg.grid_points is not None:
        overrides["grid_points"] = cfg.grid_points
    if cfg.input_dim is not None:
        overrides["input_dim"] = cfg.input_dim
    try:
        return pdd.default_problem(cfg.problem, cfg.tau, **overrides)
    except ValueError as exc:
        raise ConfigError("problem", str(exc)) from None


def synthetic_spec(cfg: ExperimentConfig) -> sp.SyntheticSpec:
    return sp.SyntheticSpec(n_modes=cfg.n_basis, f0=cfg.synth_f0, alpha=cfg.synth_alpha, beta=cfg.synth_beta,
                            m=cfg.m_train, input_dim=cfg.input_dim or 5)


def load_or_build(cfg: ExperimentConfig):
    """``(train, test, extra)``; ``extra`` holds synthetic functions when relevant."""
    if cfg.data_dir is not None:
        root = Path(cfg.data_dir)
        test = pdd.load_dataset(root / "test") if (root / "test" / "meta.json").exists() else None
        return pdd.load_dataset(root / "train"), test, None
    if cfg.problem == "synthetic":
        tr, te, fn = sp.synth_dataset(synthetic_spec(cfg), np.random.default_rng(cfg.seed), m_test=cfg.m_test)
        return tr, te, fn
    tr, te = pdd.build_dataset(problem_spec(cfg), cfg.m_train, cfg.m_test, cfg.seed)
    return tr, te, None


# ---------------------------------------------------------------- single run


@dataclass
class RunReport:
    config: ExperimentConfig
    train_error: ed.ErrorReport
    test_error: ed.ErrorReport | None
    history: dn.TrainHistory
    modes: ed.ModeLossReport | None = None
    coupling: list = field(default_factory=list)
    wall_clock: float = 0.0
    out_dir: Path | None = None

    @property
    def diverged(self):
        return self.history.diverged

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "train_error": self.train_error.to_dict(),
            "test_error": None if self.test_error is None else self.test_error.to_dict(),
            "diverged": self.history.diverged,
            "diverged_epoch": self.history.diverged_epoch,
            "epochs_completed": self.history.epoch[-1] if self.history.epoch else None,
            "final_train_loss": self.history.train_loss[-1] if self.history.train_loss else None,
            "final_test_loss": self.history.test_loss[-1] if self.history.test_loss else None,
            "wall_clock": self.wall_clock,
        }


REPORT_FIELDS = {
    "schema", "config", "config_hash", "train_error", "test_error", "diverged", "diverged_epoch",
    "epochs_completed", "final_train_loss", "final_test_loss", "wall_clock",
}


def parse_report(path) -> dict:
    """Load ``report.json``; rejects unknown schema versions and fields."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported report schema {data.get('schema')!r}")
    unknown = set(data) - REPORT_FIELDS
    if unknown:
        raise ValueError(f"{path}: unknown report fields {sorted(unknown)}")
    data["config"] = ExperimentConfig.from_dict(data["config"])
    data["train_error"] = ed.ErrorReport.from_dict(data["train_error"])
    if data["test_error"] is not None:
        data["test_error"] = ed.ErrorReport.from_dict(data["test_error"])
    return data


def output_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUT_ENV, "runs"))


def error_reports(model: dn.Model, train_set, test_set):
    t = dn.trunk(model)
    bt_tr, _ = dn.branch_forward(model.branch, train_set.p_hat)
    train_err = ed.decompose(t, bt_tr.T, train_set.a)
    test_err = None
    if test_set is not None and test_set.m > 0:
        bt_te, _ = dn.branch_forward(model.branch, test_set.p_hat)
        test_err = ed.decompose(t, bt_te.T, test_set.a)
    return train_err, test_err


def run(cfg: ExperimentConfig, out_dir=None, data=None) -> RunReport:
    """Train one model and write its report files.

    ``data`` may supply a prebuilt ``(train, test, extra)`` triple.
    """
    start = time.perf_counter()
    train_set, test_set, _ = data if data is not None else load_or_build(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    trunk_shape = (cfg.trunk_width or cfg.width, cfg.trunk_depth or cfg.depth)
    try:
        model = dn.build_model(cfg.trunk, train_set, cfg.n_basis, cfg.width, cfg.depth, rng,
                               stacked=cfg.stacked, trunk_shape=trunk_shape)
    except ValueError as exc:
        raise ConfigError("n_basis", str(exc)) from None
    opt = OptimizerConfig(cfg.optimizer, cfg.alpha1)
    recorder = None
    if cfg.coupling_every and model.modified:
        recorder = cpl.CouplingRecorder(train_set, cfg.coupling_every)
    model, history = dn.train(model, train_set, test_set, opt, e=cfg.e, epochs=cfg.epochs,
                              mode_every=cfg.mode_every, observer=recorder)
    train_err, test_err = error_reports(model, train_set, test_set)
    reports = recorder.fill_measured(history) if recorder is not None else []
    rep = RunReport(cfg, train_err, test_err, history, history.final_modes(), reports,
                    time.perf_counter() - start)
    if out_dir is not None:
        write_run(rep, out_dir)
    return rep


def write_run(rep: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(rep.config.to_json(), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    dn.write_history_csv(out / "history.csv", rep.history)
    if rep.modes is not None:
        ed.write_modes_csv(out / "modes.csv", rep.modes)
    if rep.coupling:
        cpl.write_coupling_csv(out / "coupling.csv", rep.coupling)
    rep.out_dir = out
    return out


# ---------------------------------------------------------------- sweeps


def _pool_map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_rows(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in r])


BASIS_COLUMNS = ["basis", "N", "delta_train", "delta_trunk_train", "delta_branch_train",
                 "delta_test", "delta_trunk_test", "delta_branch_test"]


def _basis_job(args):
    cfg, data = args
    rep = run(cfg, data=data)
    te = rep.test_error
    nan = float("nan")
    return [cfg.trunk, cfg.n_basis, rep.train_error.delta_total, rep.train_error.delta_trunk,
            rep.train_error.delta_branch,
            te.delta_total if te else nan, te.delta_trunk if te else nan, te.delta_branch if te else nan]


def basis_sweep(cfg: ExperimentConfig, out_dir=None) -> list:
    """One row per (basis, N): relative total, trunk and branch errors, train and test."""
    data = load_or_build(cfg)
    bases = cfg.trunk_list or (cfg.trunk,)
    sizes = cfg.n_basis_list or (cfg.n_basis,)
    jobs = [(cfg.replace(trunk=b, n_basis=n, e=0.0), data) for b in bases for n in sizes]
    rows = _pool_map(_basis_job, jobs, cfg.workers)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_rows(Path(out_dir) / "basis_sweep.csv", BASIS_COLUMNS, rows)
    return rows


def _mode_rows(label, rep):
    m = rep.modes
    if m is None:
        return []
    rows = []
    for i in range(m.n_modes):
        lt = float(m.L_test[i]) if m.L_test is not None else float("nan")
        bt = float(m.base_test[i]) if m.base_test is not None else float("nan")
        rows.append([label, i + 1, float(m.sigma[i]), float(m.L_train[i]), lt, float(m.base_train[i]), bt])
    return rows


MODE_SWEEP_COLUMNS = ["setting", "i", "sigma", "L_train", "L_test", "base_train", "base_test"]


def _run_job(args):
    cfg, data, out = args
    return run(cfg, out_dir=out, data=data)


def exponent_sweep(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Mode losses for every reweight exponent in ``cfg.e_list``."""
    data = load_or_build(cfg)
    exps = cfg.e_list or (cfg.e,)
    out = Path(out_dir) if out_dir is not None else None
    jobs = [(cfg.replace(e=float(e), trunk="svd_scaled"), data, out / f"e={e:g}" if out else None) for e in exps]
    reps = _pool_map(_run_job, jobs, cfg.workers)
    result = {float(e): r for e, r in zip(exps, reps)}
    if out is not None:
        rows = [row for e, r in result.items() for row in _mode_rows(f"e={e:g}", r)]
        _write_rows(out / "sweep_exponents.csv", MODE_SWEEP_COLUMNS, rows)
    return result


def optimizer_sweep(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Mode losses per optimizer in ``cfg.optimizer_list``."""
    data = load_or_build(cfg)
    opts = cfg.optimizer_list or ("GD", "Adam", "AdaGrad")
    out = Path(out_dir) if out_dir is not None else None
    jobs = [(cfg.replace(optimizer=o), data, out / o if out else None) for o in opts]
    reps = _pool_map(_run_job, jobs, cfg.workers)
    result = dict(zip(opts, reps))
    if out is not None:
        rows = [row for o, r in result.items() for row in _mode_rows(o, r)]
        _write_rows(out / "sweep_optimizers.csv", MODE_SWEEP_COLUMNS, rows)
    return result


WIDTH_COLUMNS = ["width", "seed", "mean_neg_gamma", "final_train_loss", "final_test_loss", "params"]


def width_sweep(cfg: ExperimentConfig, out_dir=None) -> list:
    """Coupling strength and losses across ``cfg.width_list`` (and ``cfg.seed_list``)."""
    data = load_or_build(cfg)
    widths = cfg.width_list or (cfg.width,)
    seeds = cfg.seed_list or (cfg.seed,)
    every = cfg.coupling_every or 10
    out = Path(out_dir) if out_dir is not None else None
    jobs = []
    for w in widths:
        for s in seeds:
            sub = cfg.replace(width=int(w), seed=int(s), coupling_every=every, trunk="svd_scaled")
            jobs.append((sub, data, out / f"w={w}_seed={s}" if out else None))
    reps = _pool_map(_run_job, jobs, cfg.workers)
    rows = []
    for (sub, _, _), rep in zip(jobs, reps):
        params = param_count(MlpShape(data[0].p_hat.shape[0], sub.width, sub.depth, sub.n_basis))
        rows.append([sub.width, sub.seed, cpl.mean_neg_gamma(rep.coupling), rep.history.train_loss[-1],
                     rep.history.test_loss[-1], params])
    if out is not None:
        _write_rows(out / "sweep_widths.csv", WIDTH_COLUMNS, rows)
    return rows


def stacked_comparison(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Stacked branch of width ``cfg.width`` against the parameter-matched unstacked one."""
    data = load_or_build(cfg)
    w_unst = dn.match_unstacked_width(cfg.width, cfg.n_basis, cfg.depth, data[0].p_hat.shape[0])
    out = Path(out_dir) if out_dir is not None else None
    jobs = [
        (cfg.replace(stacked=True), data, out / "stacked" if out else None),
        (cfg.replace(stacked=False, width=w_unst), data, out / "unstacked" if out else None),
    ]
    reps = _pool_map(_run_job, jobs, cfg.workers)
    result = {"stacked": reps[0], "unstacked": reps[1], "w_unstacked": w_unst}
    if out is not None:
        rows = _mode_rows("stacked", reps[0]) + _mode_rows(f"unstacked(w={w_unst})", reps[1])
        _write_rows(out / "sweep_stacked.csv", MODE_SWEEP_COLUMNS, rows)
    return result


# ---------------------------------------------------------------- frequencies


def right_singular_frequencies(points, v, z=None, k_tv=3, k_le=50):
    """TV, LE and projected-Fourier estimates for the columns of ``v``.

    Neighbor counts are capped at ``m - 1`` for small sample sets.
    """
    m = points.shape[1]
    tv = sp.estimate_all(points, v, "TV", min(k_tv, m - 1)).values
    le = sp.estimate_all(points, v, "LaplacianEnergy", min(k_le, m - 1)).values
    proj = sp.default_projections(points, z or min(points.shape))
    pf = sp.estimate_all(points, v, "ProjectedFourier", projections=proj).values
    return tv, le, pf


def spectral_report(cfg: ExperimentConfig, out_dir=None, train_model=True):
    """Frequencies of the right singular functions, optionally with trained mode losses."""
    train_set, test_set, fn = data = load_or_build(cfg)
    rep = None
    if train_model:
        rep = run(cfg.replace(trunk="svd_scaled", e=0.0), out_dir=out_dir, data=data)
    v1 = _svd_split(train_set, cfg.n_basis).v1
    z = None
    if cfg.problem != "synthetic":
        z = min(problem_spec(cfg).n_modes, *train_set.p_hat.shape)
    tv, le, pf = right_singular_frequencies(train_set.p_hat, v1, z)
    dictated = fn.frequencies if fn is not None else None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        sp.write_frequencies_csv(Path(out_dir) / "frequencies.csv", tv, le, pf, dictated)
    return {"tv": tv, "le": le, "proj": pf, "dictated": dictated, "run": rep}


def _svd_split(ds, n):
    return truncate(svd(ds.a), n)


# ---------------------------------------------------------------- plot series

PLOT_KINDS = ("mode_losses", "loss_curves", "coupling", "frequencies", "basis_sweep")
SERIES_COLUMNS = ["series", "x", "y"]


def _read_named_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_series(report_dir, kind, out_path=None) -> Path:
    """Long-format ``series,x,y`` CSV for one figure family."""
    if kind not in PLOT_KINDS:
        raise ConfigError("kind", f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    src = Path(report_dir)
    rows = []
    if kind == "mode_losses":
        for r in _read_named_csv(src / "modes.csv"):
            for s in ("sigma", "L_train", "L_test", "weighted_train", "weighted_test", "base_train", "base_test"):
                if r[s] != "":
                    rows.append([s, r["i"], r[s]])
    elif kind == "loss_curves":
        hist = dn.read_history_csv(src / "history.csv")
        for e, tr, te, lr in zip(hist.epoch, hist.train_loss, hist.test_loss, hist.lr):
            rows += [["train_loss", e, tr], ["test_loss", e, te], ["lr", e, lr]]
    elif kind == "coupling":
        for r in cpl.read_coupling_csv(src / "coupling.csv"):
            for s in ("d", "omega", "taylor_pred", "measured_dl"):
                if r[s] is not None:
                    rows.append([s, r["epoch"], r[s]])
            if r["gamma"] is not None:
                rows += [["gamma", r["epoch"], r["gamma"]], ["neg_gamma", r["epoch"], -r["gamma"]]]
    elif kind == "frequencies":
        cols = sp.read_frequencies_csv(src / "frequencies.csv")
        for s in ("tv_k3", "le_k50", "proj_fourier", "dictated"):
            for i, v in zip(cols["mode"], cols[s]):
                if np.isfinite(v):
                    rows.append([s, int(i), float(v)])
    else:
        for r in _read_named_csv(src / "basis_sweep.csv"):
            for s in BASIS_COLUMNS[2:]:
                rows.append([f"{r['basis']}:{s}", r["N"], r[s]])
    out = Path(out_path) if out_path is not None else src / f"series_{kind}.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], format(float(r[2]), ".17g")])
    return out


def lr_series(epochs, alpha1):
    return [lr_at(max(t, 1), alpha1) for t in range(epochs + 1)]
