"""Command-line entry point ``modedecomp``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment as ex
from . import pde_data as pdd
from .errors import ConfigError, NonFiniteError, SolverInstabilityError, TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# flag name -> (config field, type)
OVERRIDES = {
    "seed": ("seed", int),
    "epochs": ("epochs", int),
    "n_basis": ("n_basis", int),
    "trunk": ("trunk", str),
    "optimizer": ("optimizer", str),
    "alpha1": ("alpha1", float),
    "e": ("e", float),
    "width": ("width", int),
    "depth": ("depth", int),
    "workers": ("workers", int),
    "data_dir": ("data_dir", str),
}


def _parse_set(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_config(args) -> ex.ExperimentConfig:
    """Preset, then config file, then ``--set`` pairs, then explicit flags."""
    data = {}
    if args.preset:
        if args.preset not in ex.PRESETS:
            raise ConfigError("preset", f"unknown preset {args.preset!r}; choose from {sorted(ex.PRESETS)}")
        data.update(ex.PRESETS[args.preset], name=args.preset)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config", "config must be a JSON object")
        data.update(loaded)
    data.update(_parse_set(args.set))
    for flag, (name, _) in OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[name] = val
    return ex.ExperimentConfig.from_dict(data)


def _out_dir(args, cfg, suffix=""):
    root = ex.output_root(args.out)
    return root / (cfg.name + suffix) if args.out is None else root


def _common(p):
    p.add_argument("--preset", help="named preset, see 'modedecomp presets'")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--out", help="output directory (default: $MODEDECOMP_OUT/<name>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-basis", dest="n_basis", type=int)
    p.add_argument("--trunk")
    p.add_argument("--optimizer")
    p.add_argument("--alpha1", type=float)
    p.add_argument("--e", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--data-dir", dest="data_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modedecomp", description="Trunk/branch error analysis for DeepONets.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "solve the PDE and save train/test datasets",
        "train": "train one model and write report.json, history.csv, modes.csv",
        "sweep-bases": "relative errors across trunk bases and basis sizes",
        "sweep-exponents": "mode losses across reweight exponents",
        "sweep-optimizers": "mode losses across optimizers",
        "sweep-widths": "coupling strength across branch widths, or stacked vs unstacked",
        "coupling": "train with the coupling matrix sampled during training",
        "spectral": "frequency estimates of the right singular functions",
        "synth": "synthetic functions with prescribed frequencies, trained and estimated",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "sweep-widths":
            p.add_argument("--compare-stacked", action="store_true",
                           help="stacked branch at --width against the parameter-matched unstacked one")
        if name in ("spectral",):
            p.add_argument("--no-train", action="store_true", help="estimate frequencies only")
    p = sub.add_parser("plot-series", help="long-format series,x,y CSV from a run directory")
    p.add_argument("run_dir")
    p.add_argument("kind", help=f"one of {', '.join(ex.PLOT_KINDS)}")
    p.add_argument("--out")
    sub.add_parser("presets", help="list presets")
    return parser


def _report_run(rep):
    tr = rep.train_error
    line = f"train delta={tr.delta_total:.4g} (trunk {tr.delta_trunk:.4g}, branch {tr.delta_branch:.4g})"
    if rep.test_error is not None:
        te = rep.test_error
        line += f"; test delta={te.delta_total:.4g} (trunk {te.delta_trunk:.4g}, branch {te.delta_branch:.4g})"
    print(line)
    if rep.out_dir is not None:
        print(f"wrote {rep.out_dir}")


def _dispatch(args) -> int:
    if args.command == "presets":
        for name in sorted(ex.PRESETS):
            print(name)
        return EXIT_OK
    if args.command == "plot-series":
        path = ex.emit_plot_series(args.run_dir, args.kind, args.out)
        print(f"wrote {path}")
        return EXIT_OK

    cfg = load_config(args)
    out = _out_dir(args, cfg)
    cmd = args.command
    if cmd == "gen-data":
        if cfg.problem == "synthetic":
            raise ConfigError("problem", "gen-data handles PDE problems; use 'synth' for synthetic data")
        train_set, test_set = pdd.build_dataset(ex.problem_spec(cfg), cfg.m_train, cfg.m_test, cfg.seed)
        pdd.save_dataset(out / "train", train_set)
        pdd.save_dataset(out / "test", test_set)
        print(f"wrote {out} (train {train_set.a.shape}, test {test_set.a.shape})")
    elif cmd == "train":
        rep = ex.run(cfg, out)
        _report_run(rep)
        if rep.diverged:
            print(f"training diverged at epoch {rep.history.diverged_epoch}", file=sys.stderr)
            return EXIT_NUMERIC
    elif cmd == "coupling":
        rep = ex.run(cfg.replace(trunk="svd_scaled", coupling_every=cfg.coupling_every or 10), out)
        _report_run(rep)
        print(f"mean -gamma = {ex.cpl.mean_neg_gamma(rep.coupling):.4g} over {len(rep.coupling)} samples")
        if rep.diverged:
            return EXIT_NUMERIC
    elif cmd == "sweep-bases":
        for row in ex.basis_sweep(cfg, out):
            print(f"{row[0]:>12s} N={row[1]:<4d} delta={row[2]:.4g} trunk={row[3]:.4g} branch={row[4]:.4g}")
    elif cmd == "sweep-exponents":
        for e, rep in ex.exponent_sweep(cfg, out).items():
            print(f"e={e:g}: improved train modes {int(rep.modes.improved_train.sum())}/{rep.modes.n_modes}")
    elif cmd == "sweep-optimizers":
        for o, rep in ex.optimizer_sweep(cfg, out).items():
            print(f"{o}: improved train modes {int(rep.modes.improved_train.sum())}/{rep.modes.n_modes}")
    elif cmd == "sweep-widths":
        if args.compare_stacked:
            res = ex.stacked_comparison(cfg, out)
            for key in ("stacked", "unstacked"):
                print(f"{key}: final train loss {res[key].history.train_loss[-1]:.4g}")
            print(f"matched unstacked width {res['w_unstacked']}")
        else:
            for row in ex.width_sweep(cfg, out):
                print(f"width={row[0]} seed={row[1]} mean -gamma={row[2]:.4g} train loss={row[3]:.4g}")
    elif cmd in ("spectral", "synth"):
        if cmd == "synth" and cfg.problem != "synthetic":
            cfg = cfg.replace(problem="synthetic")
        res = ex.spectral_report(cfg, out, train_model=not getattr(args, "no_train", False))
        print("TV(k=3):", " ".join(f"{v:.4g}" for v in res["tv"]))
        if res["dictated"] is not None:
            print("dictated:", " ".join(f"{v:.4g}" for v in res["dictated"]))
        print(f"wrote {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, SolverInstabilityError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
