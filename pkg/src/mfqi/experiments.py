"""Replication grids: simulate -> estimate per (N, m) cell, then aggregate.

Replication ``r`` of cell ``(N, m)`` uses seed ``derive_seed(base_seed, N, m, r)``,
so results do not depend on worker count, cell order, or which other cells
are in the grid.  Each cell gets its own directory under the output root.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CONSERVING, Params, StateCounts, check_convention
from .estimator import EstimateReport, estimate
from .simulator import derive_seed, seed_tuple, simulate
from .stats import MomentSummary, ks_normality, moment_summary

log = logging.getLogger(__name__)

ABORT_FRACTION = 0.5


@dataclass
class ExperimentGrid:
    cells: list            # (N, m) pairs
    replications: int
    params: Params
    convention: str = CONSERVING
    base_seed: tuple = (0,)
    out_dir: Path | None = None
    initial_level: int = 0  # every queue starts with this many jobs (0 = empty)

    def __post_init__(self):
        self.cells = [(int(N), int(m)) for N, m in self.cells]
        self.base_seed = seed_tuple(self.base_seed)
        check_convention(self.convention)
        if self.replications < 2:
            raise ValueError("replications must be >= 2")
        if not self.cells or any(N < 1 or m < 1 for N, m in self.cells):
            raise ValueError("cells must be non-empty with positive N and m")
        if self.initial_level < 0:
            raise ValueError("initial_level must be >= 0")

    def config(self) -> dict:
        p = self.params
        return {"lambda_star": p.lam, "nu_star": p.nu, "L": p.L, "T": p.T,
                "convention": self.convention, "base_seed": list(self.base_seed),
                "initial_level": self.initial_level, "replications": self.replications}


@dataclass
class CellResult:
    N: int
    m: int
    reports: list
    n_illposed: int
    aborted: bool = False
    lam: MomentSummary | None = None
    nu: MomentSummary | None = None
    norm_lam: MomentSummary | None = None
    norm_nu: MomentSummary | None = None
    ks_lam: tuple | None = None
    ks_nu: tuple | None = None
    telemetry: dict = field(default_factory=dict)

    @property
    def n_ok(self) -> int:
        return len(self.reports) - self.n_illposed


def initial_state(N: int, level: int) -> StateCounts:
    counts = np.zeros(level + 1, dtype=np.int64)
    counts[level] = N
    return StateCounts(counts, N)


def _replicate_one(args) -> dict:
    lam, nu, L, T, N, m, seed, convention, level = args
    p = Params(lam, nu, L, T)
    obs = simulate(p, N, initial_state(N, level), m, seed=seed, convention=convention)
    return estimate(obs, convention).to_json()


def normalized_errors(cell: CellResult, theta_star) -> tuple[np.ndarray, np.ndarray]:
    """``sqrt(N) (theta_hat - theta*)`` per coordinate over the well-posed replications."""
    ok = [r for r in cell.reports if r.ok]
    lam = np.array([r.lambda_hat for r in ok], dtype=float)
    nu = np.array([r.nu_hat for r in ok], dtype=float)
    s = math.sqrt(cell.N)
    return s * (lam - theta_star[0]), s * (nu - theta_star[1])


def _ks(x):
    try:
        return ks_normality(x)
    except ValueError:
        return None


def aggregate(N: int, m: int, reports: list, params: Params, telemetry=None) -> CellResult:
    n_ill = sum(not r.ok for r in reports)
    cell = CellResult(N, m, reports, n_ill, telemetry=telemetry or {})
    if n_ill > ABORT_FRACTION * len(reports):
        cell.aborted = True
        log.warning("cell N=%d m=%d aborted: %d/%d replications ill-posed", N, m, n_ill, len(reports))
        return cell
    if cell.n_ok < 2:
        return cell
    ok = [r for r in reports if r.ok]
    cell.lam = moment_summary([r.lambda_hat for r in ok], params.lam)
    cell.nu = moment_summary([r.nu_hat for r in ok], params.nu)
    el, en = normalized_errors(cell, (params.lam, params.nu))
    cell.norm_lam = moment_summary(el)
    cell.norm_nu = moment_summary(en)
    cell.ks_lam, cell.ks_nu = _ks(el), _ks(en)
    return cell


def summary_json(cell: CellResult, grid: ExperimentGrid) -> dict:
    def est(s):
        return None if s is None else {"mean": s.mean, "sd": s.sd, "mse": s.mse,
                                       "mean_error": s.mean_error}

    def norm(s, ks):
        if s is None:
            return None
        stat, p = ks if ks is not None else (None, None)
        return {"mean": s.mean, "var": s.var, "skew": s.skewness, "kurt": s.kurtosis,
                "ks_stat": stat, "ks_p": p}

    return {"cell": {"N": cell.N, "m": cell.m}, "n_ok": cell.n_ok, "n_illposed": cell.n_illposed,
            "aborted": cell.aborted, "lambda": est(cell.lam), "nu": est(cell.nu),
            "normalized": {"lambda": norm(cell.norm_lam, cell.ks_lam),
                           "nu": norm(cell.norm_nu, cell.ks_nu)},
            "config": grid.config()}


def cell_dir(root, N: int, m: int) -> Path:
    return Path(root) / f"N{N}_m{m}"


def _write_cell(cell: CellResult, grid: ExperimentGrid, d: Path):
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "reports.jsonl", "w") as fh:
        for r in cell.reports:
            fh.write(json.dumps(r.to_json()) + "\n")
    el, en = normalized_errors(cell, (grid.params.lam, grid.params.nu))
    with open(d / "normalized_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "lambda", "nu"])
        for k, (a, b) in enumerate(zip(el, en)):
            w.writerow([k, format(a, ".17g"), format(b, ".17g")])
    with open(d / "histogram_bins.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["coordinate", "left", "right", "count"])
        for name, x in (("lambda", el), ("nu", en)):
            if x.size < 2 or not np.ptp(x) > 0:
                continue
            counts, edges = np.histogram(x, bins=np.histogram_bin_edges(x, bins="fd"))
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([name, format(lo, ".17g"), format(hi, ".17g"), int(c)])
    (d / "telemetry.json").write_text(json.dumps(cell.telemetry, indent=2) + "\n")
    # summary last: its presence marks the cell complete for --resume
    (d / "summary.json").write_text(json.dumps(summary_json(cell, grid), indent=2) + "\n")


def _load_cell(grid: ExperimentGrid, N: int, m: int, d: Path) -> CellResult:
    summary = json.loads((d / "summary.json").read_text())
    if summary["config"] != grid.config():
        raise ValueError(f"{d}: existing results were produced with a different config")
    with open(d / "reports.jsonl") as fh:
        reports = [EstimateReport.from_json(json.loads(line)) for line in fh if line.strip()]
    tel = d / "telemetry.json"
    telemetry = json.loads(tel.read_text()) if tel.exists() else {}
    return aggregate(N, m, reports, grid.params, telemetry)


def default_workers() -> int:
    return max(1, int(os.environ.get("MFQI_WORKERS", "1")))


def run_grid(grid: ExperimentGrid, workers: int | None = None, resume: bool = False) -> list:
    """Run every cell; returns one :class:`CellResult` per cell in grid order.

    With ``resume``, cells whose ``summary.json`` already exists are loaded
    instead of recomputed.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    p = grid.params
    results = []
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for N, m in grid.cells:
            d = cell_dir(grid.out_dir, N, m) if grid.out_dir is not None else None
            if resume and d is not None and (d / "summary.json").exists():
                log.info("cell N=%d m=%d: loaded from %s", N, m, d)
                results.append(_load_cell(grid, N, m, d))
                continue
            tasks = [(p.lam, p.nu, p.L, p.T, N, m, derive_seed(grid.base_seed, N, m, r),
                      grid.convention, grid.initial_level) for r in range(grid.replications)]
            t0 = time.perf_counter()
            if pool is None:
                raw = [_replicate_one(t) for t in tasks]
            else:
                raw = list(pool.map(_replicate_one, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
            wall = time.perf_counter() - t0
            reports = [EstimateReport.from_json(r) for r in raw]
            telemetry = {"wall_clock_s": wall, "workers": workers,
                         "events": [r.extra.get("events") for r in reports],
                         "expected_event_bound": N * (p.lam + p.nu) * p.T}
            cell = aggregate(N, m, reports, p, telemetry)
            log.info("cell N=%d m=%d: %d ok, %d ill-posed, %.1fs", N, m, cell.n_ok,
                     cell.n_illposed, wall)
            if d is not None:
                _write_cell(cell, grid, d)
            results.append(cell)
    finally:
        if pool is not None:
            pool.shutdown()
    return results


def format_tables(results: list) -> str:
    """Plain-text analogues of the estimate, normalized-error and KS tables."""
    def pair(a, b, f=".3f"):
        return "-" if a is None else f"({a:{f}}, {b:{f}})"

    lines = ["estimates", f"{'N':>6} {'m':>7}  {'mean':<18}{'sd':<18}{'mse':<20}{'mean error':<18}"]
    for c in results:
        if c.lam is None:
            lines.append(f"{c.N:>6} {c.m:>7}  {'aborted' if c.aborted else 'too few'}")
            continue
        lines.append(f"{c.N:>6} {c.m:>7}  {pair(c.lam.mean, c.nu.mean):<18}"
                     f"{pair(c.lam.sd, c.nu.sd):<18}{pair(c.lam.mse, c.nu.mse, '.4f'):<20}"
                     f"{pair(c.lam.mean_error, c.nu.mean_error):<18}")
    lines += ["", "normalized errors sqrt(N)(theta_hat - theta*)",
              f"{'N':>6} {'m':>7}  {'mean':<20}{'var':<20}{'skew':<18}{'kurt':<18}{'KS p':<18}"]
    for c in results:
        if c.norm_lam is None:
            continue
        ksp = pair(c.ks_lam[1] if c.ks_lam else math.nan, c.ks_nu[1] if c.ks_nu else math.nan, ".2f")
        lines.append(f"{c.N:>6} {c.m:>7}  {pair(c.norm_lam.mean, c.norm_nu.mean, '.2f'):<20}"
                     f"{pair(c.norm_lam.var, c.norm_nu.var, '.2f'):<20}"
                     f"{pair(c.norm_lam.skewness, c.norm_nu.skewness, '.2f'):<18}"
                     f"{pair(c.norm_lam.kurtosis, c.norm_nu.kurtosis, '.2f'):<18}{ksp:<18}")
    return "\n".join(lines)


DEFAULT_CELLS = [(100, 1000), (500, 10000), (1000, 10000), (2000, 20000), (3000, 30000)]
