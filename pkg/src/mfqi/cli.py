"""``mfqi`` command line: simulate, ode, estimate, fluctuation, experiment, validate.

Every subcommand takes ``--config FILE.toml`` (flat keys named like the long
flags, dashes as underscores); explicit flags override the file.  The
resolved configuration and its hash are written into each output sidecar.

Exit codes: 0 ok, 2 usage or parse error, 3 ill-posed estimate, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import experiments, fluctuation, meanfield, validate
from .core import CONVENTIONS, Params
from .estimator import DET_THRESHOLD, IllPosed, coefficients_from_path, estimate, solve_lse
from .simulator import DatasetError, read_observations, seed_tuple, simulate, write_observations

EXIT_OK, EXIT_USAGE, EXIT_ILLPOSED, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mfqi")

MODEL = {"lambda": 0.5, "nu": 1.0, "L": 2, "T": 10.0, "convention": "conserving"}
DEFAULTS = {
    "simulate": {**MODEL, "N": 100, "m": 1000, "seed": 0, "initial_level": 0, "out": "data"},
    "ode": {**MODEL, "points": 1000, "J": None, "initial_level": 0, "out": "path"},
    "estimate": {"convention": "conserving", "det_threshold": DET_THRESHOLD},
    "fluctuation": {**MODEL, "points": 10, "J": None, "initial_level": 0, "samples": 0,
                    "seed": 0, "out": "fluctuation"},
    "experiment": {**MODEL, "cells": [list(c) for c in experiments.DEFAULT_CELLS],
                   "replications": 100, "seed": 0, "initial_level": 0, "workers": None,
                   "resume": False, "out": "experiment"},
    "validate": {"seed": 0},
}


class UsageError(Exception):
    pass


def _cells(text: str):
    try:
        return [[int(v) for v in c.lower().split("x")] for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cells must look like 100x1000,500x10000: {text!r}")


def _add_model(p: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    p.add_argument("--lambda", dest="lambda", type=float, default=S, help="arrival rate per server (0.5)")
    p.add_argument("--nu", type=float, default=S, help="service rate (1.0)")
    p.add_argument("-L", dest="L", type=int, default=S, help="number of sampled queues (2)")
    p.add_argument("-T", dest="T", type=float, default=S, help="horizon (10)")
    p.add_argument("--convention", choices=CONVENTIONS, default=S,
                   help="service term at level 0: conserving (nu*x1) or literal (nu*(x1-x0))")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="mfqi", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate the N-server system and write a dataset")
    _add_model(p)
    p.add_argument("-N", dest="N", type=int, default=S, help="number of servers (100)")
    p.add_argument("-m", dest="m", type=int, default=S, help="observations at t_k = kT/m (1000)")
    p.add_argument("--seed", type=int, default=S, help="RNG seed (0)")
    p.add_argument("--initial-level", dest="initial_level", type=int, default=S,
                   help="every queue starts with this many jobs (0 = empty)")
    p.add_argument("-o", "--out", default=S, help="output prefix; writes PREFIX.csv and PREFIX.json")

    p = sub.add_parser("ode", help="solve the mean-field ODE and write the path")
    _add_model(p)
    p.add_argument("--points", type=int, default=S, help="output grid intervals on [0, T] (1000)")
    p.add_argument("-J", dest="J", type=int, default=S, help="truncation level (automatic)")
    p.add_argument("--initial-level", dest="initial_level", type=int, default=S,
                   help="start with all mass at this level (0)")
    p.add_argument("-o", "--out", default=S, help="output prefix; writes PREFIX.csv and PREFIX.json")

    p = sub.add_parser("estimate", help="estimate (lambda, nu) from a dataset or an ODE path")
    p.add_argument("input", help="dataset prefix from `simulate`, or a path CSV from `ode`")
    p.add_argument("--convention", choices=CONVENTIONS, default=S)
    p.add_argument("--det-threshold", dest="det_threshold", type=float, default=S,
                   help="relative determinant threshold (1e-10)")

    p = sub.add_parser("fluctuation", help="covariance of the Gaussian limit and limit-law samples")
    _add_model(p)
    p.add_argument("--points", type=int, default=S, help="covariance output times on [0, T] (10)")
    p.add_argument("-J", dest="J", type=int, default=S, help="truncation level (automatic)")
    p.add_argument("--initial-level", dest="initial_level", type=int, default=S)
    p.add_argument("--samples", type=int, default=S, help="limit-law draws to sample (0)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("-o", "--out", default=S, help="output directory")

    p = sub.add_parser("experiment", help="replication grid over (N, m) cells")
    _add_model(p)
    p.add_argument("--cells", type=_cells, default=S, help="e.g. 100x1000,3000x30000")
    p.add_argument("--replications", type=int, default=S, help="replications per cell (100)")
    p.add_argument("--seed", type=int, default=S, help="base seed (0)")
    p.add_argument("--initial-level", dest="initial_level", type=int, default=S)
    p.add_argument("--workers", type=int, default=S, help="worker processes (env MFQI_WORKERS, else 1)")
    p.add_argument("--resume", action="store_true", default=S, help="skip cells already complete")
    p.add_argument("-o", "--out", default=S, help="output directory")

    p = sub.add_parser("validate", help="run the fast self-checks")
    p.add_argument("--seed", type=int, default=S)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", type=Path, default=None, help="TOML file with default values")
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if ns.config is not None:
        try:
            loaded = tomllib.loads(ns.config.read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"{ns.config}: {exc}") from None
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"{ns.config}: unknown keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        if hasattr(ns, key):
            cfg[key] = getattr(ns, key)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _params(cfg) -> Params:
    try:
        return Params(float(cfg["lambda"]), float(cfg["nu"]), int(cfg["L"]), float(cfg["T"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _rho0(level: int) -> np.ndarray:
    r = np.zeros(level + 1)
    r[level] = 1.0
    return r


def cmd_simulate(cfg, header):
    p = _params(cfg)
    if cfg["m"] < 1:
        raise UsageError("-m must be >= 1")
    if cfg["N"] < 1:
        raise UsageError("-N must be >= 1")
    obs = simulate(p, cfg["N"], experiments.initial_state(cfg["N"], cfg["initial_level"]), cfg["m"],
                   seed=seed_tuple(cfg["seed"]), convention=cfg["convention"])
    csv_path, json_path = write_observations(obs, cfg["out"], {**header, "events": obs.events})
    _emit({"csv": str(csv_path), "json": str(json_path), "events": obs.events})
    return EXIT_OK


def cmd_ode(cfg, header):
    p = _params(cfg)
    if cfg["points"] < 2:
        raise UsageError("--points must be >= 2")
    path = meanfield.solve_ode(p, _rho0(cfg["initial_level"]), np.linspace(0, p.T, cfg["points"] + 1),
                               cfg["J"], cfg["convention"])
    prefix = Path(cfg["out"])
    csv_path = meanfield.write_path_csv(path, prefix.with_suffix(".csv"))
    side = prefix.with_suffix(".json")
    side.write_text(json.dumps({**header, "J": path.J}, indent=2, sort_keys=True) + "\n")
    _emit({"csv": str(csv_path), "json": str(side), "J": path.J})
    return EXIT_OK


def _estimate_path(src: Path, cfg, header):
    try:
        grid, states = meanfield.read_path_csv(src)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    side = src.with_suffix(".json")
    meta = json.loads(side.read_text()).get("config", {}) if side.exists() else {}
    p = Params(meta.get("lambda", 1.0), meta.get("nu", 1.0), meta.get("L", 2), float(grid[-1]))
    path = meanfield.MeanFieldPath(grid, states, p, cfg["convention"], states.shape[1] - 1)
    c = coefficients_from_path(path, cfg["convention"])
    out = {"source": "path", "a11": c.a11, "a12": c.a12, "a22": c.a22, "b1": c.b1, "b2": c.b2,
           "det": c.det, "det_ratio": c.det_ratio, "convention": cfg["convention"], **header}
    try:
        out["lambda_hat"], out["nu_hat"] = solve_lse(c, cfg["det_threshold"])
    except IllPosed:
        out["lambda_hat"] = out["nu_hat"] = None
        _emit(out)
        return EXIT_ILLPOSED
    _emit(out)
    return EXIT_OK


def cmd_estimate(cfg, header, src):
    src = Path(src)
    if src.suffix == ".csv":
        with open(src) as fh:
            if fh.readline().strip() == "t,j,rho":
                return _estimate_path(src, cfg, header)
    if src.suffix in (".csv", ".json"):
        src = src.with_suffix("")
    try:
        obs = read_observations(src)
    except (DatasetError, OSError) as exc:
        raise UsageError(str(exc)) from None
    report = estimate(obs, cfg["convention"], cfg["det_threshold"])
    d = report.wellposed
    _emit({**report.to_json(), "int_rho": [d.int_rho0, d.int_rho1, d.int_rho2], **header})
    return EXIT_OK if report.ok else EXIT_ILLPOSED


def cmd_fluctuation(cfg, header):
    p = _params(cfg)
    if cfg["points"] < 1 or cfg["samples"] < 0:
        raise UsageError("--points must be >= 1 and --samples >= 0")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rho0 = _rho0(cfg["initial_level"])
    coarse = meanfield.solve_ode(p, rho0, np.linspace(0, p.T, cfg["points"] + 1), cfg["J"],
                                 cfg["convention"])
    covs = fluctuation.propagate_covariance(coarse, p, all_times=True)
    fluctuation.write_covariance_csv(covs, out / "covariance.csv")
    summary = {**header, "J": coarse.J, "sigma_diag_T": np.diag(covs[-1].sigma).tolist()}
    if cfg["samples"]:
        n = int(np.ceil(p.T / meanfield.step_size(p)))
        fine = meanfield.solve_ode(p, rho0, np.linspace(0, p.T, n + 1), coarse.J, cfg["convention"])
        s = fluctuation.limit_law_samples(fine, p, cfg["samples"], seed=seed_tuple(cfg["seed"]))
        fluctuation.write_limit_law_csv(s, out / "limit_law.csv")
        summary["limit_law"] = {"mean": [float(s.lim1.mean()), float(s.lim2.mean())],
                                "var": [float(s.lim1.var(ddof=1)), float(s.lim2.var(ddof=1))]}
    (out / "fluctuation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)
    return EXIT_OK


def cmd_experiment(cfg, header):
    p = _params(cfg)
    try:
        grid = experiments.ExperimentGrid(cfg["cells"], cfg["replications"], p, cfg["convention"],
                                          seed_tuple(cfg["seed"]), Path(cfg["out"]),
                                          cfg["initial_level"])
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    grid.out_dir.mkdir(parents=True, exist_ok=True)
    (grid.out_dir / "config.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    results = experiments.run_grid(grid, cfg["workers"], resume=bool(cfg["resume"]))
    print(experiments.format_tables(results))
    return EXIT_ILLPOSED if any(c.aborted for c in results) else EXIT_OK


def cmd_validate(cfg, header):
    rows = validate.run_all(cfg["seed"])
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in rows) else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        header = {"config": cfg, "config_hash": config_hash(cfg)}
        if ns.command == "estimate":
            return cmd_estimate(cfg, header, ns.input)
        return globals()[f"cmd_{ns.command}"](cfg, header)
    except UsageError as exc:
        print(f"mfqi {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (meanfield.TruncationOverflow, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"mfqi {ns.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
