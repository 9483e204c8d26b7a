"""Fixed-step RK4 solution of the mean-field ODE on a truncated level set."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.integrate import simpson

from .core import (CONSERVING, Params, as_simplex, check_convention, choose_truncation, u_values,
                   v_values)

log = logging.getLogger(__name__)

OVERFLOW_TOL = 1e-9
DRIFT_TOL = 1e-12


class TruncationOverflow(RuntimeError):
    """Mass at the top truncation level exceeded the tolerance; raise ``J``."""


@dataclass
class MeanFieldPath:
    grid: np.ndarray    # (n,) strictly increasing, grid[0] == 0
    states: np.ndarray  # (n, J + 1)
    params: Params
    convention: str
    J: int

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    def at(self, t: float) -> np.ndarray:
        """State at a grid time (exact match required)."""
        idx = np.flatnonzero(np.isclose(self.grid, t, rtol=0, atol=1e-12))
        if not idx.size:
            raise KeyError(f"t={t} is not a grid time")
        return self.states[idx[0]]


def step_size(p: Params) -> float:
    """Largest RK4 step: a hundredth of the fastest rate's timescale."""
    total = p.lam + p.nu
    return 0.01 / total if total > 0 else math.inf


@numba.njit(cache=True)
def _drift_into(x, lam, nu, L, conserving, out):
    n = x.shape[0]
    # tails S_j for j = 0..n (S_n = 0)
    S = np.zeros(n + 1)
    acc = 0.0
    for j in range(n - 1, -1, -1):
        acc += x[j]
        S[j] = acc
    for j in range(n):
        xm1 = x[j - 1] if j >= 1 else 0.0
        Sm1 = S[j - 1] if j >= 1 else S[0]
        if L == 2:
            u = 2.0 * xm1 * S[j] - 2.0 * x[j] * S[j + 1] + xm1 * xm1 - x[j] * x[j]
        else:
            # S_{j-1}^L - S_j^L with S_{-1} := S_0, minus the same one level up
            u = (Sm1 ** L - S[j] ** L) * (1.0 if j >= 1 else 0.0) - (S[j] ** L - S[j + 1] ** L)
        xp1 = x[j + 1] if j + 1 < n else 0.0
        if j == 0 and conserving:
            v = xp1
        else:
            v = xp1 - x[j]
        out[j] = lam * u + nu * v


@numba.njit(cache=True)
def _integrate(x0, grid, h_max, lam, nu, L, conserving, overflow_tol, drift_tol):
    n = x0.shape[0]
    states = np.empty((grid.shape[0], n))
    states[0] = x0
    x = x0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    fixes = 0
    for g in range(grid.shape[0] - 1):
        span = grid[g + 1] - grid[g]
        nsteps = max(1, int(math.ceil(span / h_max - 1e-9)))
        h = span / nsteps
        for _ in range(nsteps):
            _drift_into(x, lam, nu, L, conserving, k1)
            for i in range(n):
                tmp[i] = x[i] + 0.5 * h * k1[i]
            _drift_into(tmp, lam, nu, L, conserving, k2)
            for i in range(n):
                tmp[i] = x[i] + 0.5 * h * k2[i]
            _drift_into(tmp, lam, nu, L, conserving, k3)
            for i in range(n):
                tmp[i] = x[i] + h * k3[i]
            _drift_into(tmp, lam, nu, L, conserving, k4)
            for i in range(n):
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if x[n - 1] > overflow_tol:
                return states, g, -1
            if conserving:
                lo = 0.0
                tot = 0.0
                for i in range(n):
                    lo = min(lo, x[i])
                    tot += x[i]
                if lo < -drift_tol or abs(tot - 1.0) > drift_tol:
                    tot = 0.0
                    for i in range(n):
                        x[i] = max(x[i], 0.0)
                        tot += x[i]
                    for i in range(n):
                        x[i] /= tot
                    fixes += 1
        states[g + 1] = x
    return states, grid.shape[0] - 1, fixes


def solve_ode(p: Params, rho0, grid, J: int | None = None,
              convention: str = CONSERVING, h_max: float | None = None) -> MeanFieldPath:
    """Integrate ``rho' = F(rho)`` from ``rho0`` and return the state at each grid time.

    Each grid interval is split into equal RK4 steps no longer than ``h_max``
    (default ``0.01 / (lam + nu)``), so grid times are hit exactly.  A time 0
    is prepended when missing.  With the conserving convention, a step that
    leaves the simplex by more than 1e-12 is clipped at 0 and renormalized.

    Raises
    ------
    TruncationOverflow
        If the mass at level ``J`` ever exceeds 1e-9.
    """
    check_convention(convention)
    rho0 = np.asarray(rho0, dtype=float)
    if convention == CONSERVING:
        as_simplex(rho0, tol=1e-9)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-d array")
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    if grid[0] < 0 or grid[-1] > p.T * (1 + 1e-12):
        raise ValueError("grid must lie in [0, T]")
    if J is None:
        J = choose_truncation(p, rho0)
    if rho0.size > J + 1 and np.any(rho0[J + 1:] != 0):
        raise ValueError("rho0 has mass above the truncation level")
    x0 = np.zeros(J + 1)
    x0[: min(rho0.size, J + 1)] = rho0[: J + 1]
    h = step_size(p) if h_max is None else float(h_max)
    states, reached, fixes = _integrate(x0, grid, h, float(p.lam), float(p.nu), p.L,
                                        convention == CONSERVING, OVERFLOW_TOL, DRIFT_TOL)
    if fixes < 0:
        raise TruncationOverflow(
            f"mass at level J={J} exceeded {OVERFLOW_TOL} near t={grid[reached]:.6g}; increase J")
    if fixes:
        log.info("clipped/renormalized %d RK4 steps", fixes)
    states[0] = x0
    return MeanFieldPath(grid, states, p, convention, J)


def time_average(path: MeanFieldPath, f: str = "U", convention: str | None = None) -> np.ndarray:
    """``int_0^T f_j(rho(s)) ds`` per level by Simpson's rule on the path grid.

    ``f`` is ``"U"`` or ``"V"``; the result covers levels ``0..J+1``.
    """
    if path.grid.size < 3:
        raise ValueError("need at least 3 grid points for Simpson's rule")
    convention = path.convention if convention is None else convention
    if f == "U":
        vals = u_values(path.states)
    elif f == "V":
        vals = v_values(path.states, convention)
    else:
        raise ValueError("f must be 'U' or 'V'")
    return simpson(vals, x=path.grid, axis=0)


def integrate_levels(path: MeanFieldPath) -> np.ndarray:
    """``int_0^T rho_j(s) ds`` per level (Simpson)."""
    return simpson(path.states, x=path.grid, axis=0)


def write_path_csv(path: MeanFieldPath, dest) -> Path:
    """Long-form ``t,j,rho`` export, 17 significant digits."""
    dest = Path(dest)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "j", "rho"])
        for t, row in zip(path.grid, path.states):
            for j, v in enumerate(row):
                w.writerow([format(t, ".17g"), j, format(v, ".17g")])
    return dest


def read_path_csv(src) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_path_csv`: ``(grid, states)``; raises ``ValueError`` with a line number."""
    src = Path(src)
    rows: dict[float, dict[int, float]] = {}
    with open(src, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "j", "rho"]:
            raise ValueError(f"{src}:1: expected header t,j,rho, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                t, j, rho = float(rec[0]), int(rec[1]), float(rec[2])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{src}:{lineno}: {exc}") from None
            rows.setdefault(t, {})[j] = rho
    if not rows:
        raise ValueError(f"{src}: no data rows")
    grid = np.array(sorted(rows))
    n = max(max(r) for r in rows.values()) + 1
    states = np.zeros((grid.size, n))
    for i, t in enumerate(grid):
        for j, v in rows[t].items():
            states[i, j] = v
    return grid, states
