"""Gaussian fluctuations around the mean-field path (L = 2).

``Z = lim sqrt(N) (rho^N - rho)`` solves the linear SDE
``dZ = G(Z, rho(t)) dt + a(t) dW`` with ``a(t) = Phi(rho(t))^{1/2}``.  This
module propagates its covariance by the Lyapunov moment ODE, samples paths by
Euler-Maruyama, and evaluates the linear functionals ``I, J, K`` that give
the limit law of ``sqrt(N) (theta_hat - theta*)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import expm

from .core import (CONSERVING, Params, _require_l2, c_matrix_at, drift, du_matrix, dv_matrix,
                   g_linearized, jacobian, pad, phi_matrix)
from .estimator import coefficients_from_path
from .meanfield import MeanFieldPath, step_size, time_average
from .simulator import make_rng, seed_tuple

EIG_CLAMP = 1e-12


@dataclass
class CovarianceMatrix:
    sigma: np.ndarray  # (J + 1, J + 1) over levels 0..J
    t: float

    @property
    def J(self) -> int:
        return self.sigma.shape[0] - 1


@dataclass
class LimitLawSample:
    """``I, J, K`` and the limit vector; arrays when sampled in batch."""

    I: np.ndarray
    J: np.ndarray
    K: np.ndarray
    lim1: np.ndarray
    lim2: np.ndarray

    @property
    def limit_vector(self) -> np.ndarray:
        return np.stack([self.lim1, self.lim2], axis=-1)


def _b_matrix(rho, p: Params, convention: str) -> np.ndarray:
    return jacobian(rho, p, convention)


def _phi(rho, p: Params) -> np.ndarray:
    n = rho.size
    return phi_matrix(rho, p)[:n, :n]


def _lyapunov_rhs(rho, sigma, p, convention):
    B = _b_matrix(rho, p, convention)
    return drift(rho, p, convention)[: rho.size], B @ sigma + sigma @ B.T + _phi(rho, p)


def _substeps(span: float, h_max: float) -> tuple[int, float]:
    k = max(1, int(np.ceil(span / h_max - 1e-9)))
    return k, span / k


def propagate_covariance(path: MeanFieldPath, p: Params, z0_cov=None, convention: str | None = None,
                         h_max: float | None = None, all_times: bool = False):
    """Solve ``Sigma' = B Sigma + Sigma B^T + Phi`` along ``path`` by RK4.

    ``B(t)`` is the matrix of ``x -> G(x, rho(t))`` and ``Phi`` the diffusion
    operator, both cut to levels ``0..J``.  ``rho`` is restarted from the
    stored path state at every grid time and co-integrated inside each
    interval, so the two share one step policy.  Returns the covariance at
    ``T`` (or a list, one per grid time, with ``all_times``).
    """
    _require_l2(p)
    convention = path.convention if convention is None else convention
    n = path.J + 1
    sigma = np.zeros((n, n)) if z0_cov is None else np.array(
        getattr(z0_cov, "sigma", z0_cov), dtype=float)
    if sigma.shape != (n, n):
        raise ValueError(f"z0_cov must be {n}x{n} to match the path truncation")
    h_max = step_size(p) if h_max is None else h_max
    out = [CovarianceMatrix(sigma.copy(), 0.0)]
    for g in range(path.grid.size - 1):
        rho = path.states[g].copy()
        k, h = _substeps(path.grid[g + 1] - path.grid[g], h_max)
        for _ in range(k):
            r1, s1 = _lyapunov_rhs(rho, sigma, p, convention)
            r2, s2 = _lyapunov_rhs(rho + 0.5 * h * r1, sigma + 0.5 * h * s1, p, convention)
            r3, s3 = _lyapunov_rhs(rho + 0.5 * h * r2, sigma + 0.5 * h * s2, p, convention)
            r4, s4 = _lyapunov_rhs(rho + h * r3, sigma + h * s3, p, convention)
            rho = rho + h / 6.0 * (r1 + 2 * r2 + 2 * r3 + r4)
            sigma = sigma + h / 6.0 * (s1 + 2 * s2 + 2 * s3 + s4)
        sigma = 0.5 * (sigma + sigma.T)
        if all_times:
            out.append(CovarianceMatrix(sigma.copy(), float(path.grid[g + 1])))
    return out if all_times else CovarianceMatrix(sigma, path.T)


def sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition; eigenvalues below 1e-12 are set to 0."""
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    w = np.where(w < EIG_CLAMP, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def sample_z_paths(path: MeanFieldPath, p: Params, n_paths: int, seed=0, z0=None,
                   convention: str | None = None) -> np.ndarray:
    """Euler-Maruyama paths of ``Z`` on the path grid, shape ``(len(grid), n_paths, J + 1)``.

    One step per grid interval, so the grid spacing must not exceed the
    mean-field step ``0.01 / (lam + nu)``.
    """
    _require_l2(p)
    convention = path.convention if convention is None else convention
    dts = np.diff(path.grid)
    if dts.size and dts.max() > step_size(p) * (1 + 1e-9):
        raise ValueError("path grid is coarser than the mean-field step; refine it")
    n = path.J + 1
    rng = make_rng(seed)
    z = np.zeros((n_paths, n)) if z0 is None else np.broadcast_to(pad(z0, n), (n_paths, n)).copy()
    out = np.empty((path.grid.size, n_paths, n))
    out[0] = z
    for g, dt in enumerate(dts):
        rho = path.states[g]
        B = _b_matrix(rho, p, convention)
        a = sqrt_psd(_phi(rho, p))
        xi = rng.standard_normal((n_paths, n))
        z = z + dt * (z @ B.T) + np.sqrt(dt) * (xi @ a)
        out[g + 1] = z
    return out


def representation_residual(path: MeanFieldPath, p: Params, x, t: float,
                            convention: str | None = None) -> float:
    """``||C(t) x - G(x, rho(t))||_1`` for a zero-sum ``x`` inside the truncation."""
    convention = path.convention if convention is None else convention
    rho = path.at(t)
    n = rho.size
    x = pad(x, n)
    lhs = c_matrix_at(rho, p, convention) @ x
    rhs = g_linearized(x, rho, p, convention)[:n]
    return float(np.abs(lhs - rhs).sum())


def frozen_propagation_gap(rho, p: Params, z0, t: float, convention: str = CONSERVING,
                           steps: int = 2000) -> float:
    """Max gap between ``expm(C t) z0`` and RK4 integration of ``z' = C z`` with ``C`` frozen at ``rho``."""
    C = c_matrix_at(rho, p, convention)
    z0 = pad(z0, C.shape[0])
    exact = expm(C * t) @ z0
    z = z0.copy()
    h = t / steps
    for _ in range(steps):
        k1 = C @ z
        k2 = C @ (z + 0.5 * h * k1)
        k3 = C @ (z + 0.5 * h * k2)
        k4 = C @ (z + h * k3)
        z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(np.abs(exact - z).max())


def limit_law_sample(path: MeanFieldPath, p: Params, z_path, convention: str | None = None,
                     coefficients=None) -> LimitLawSample:
    """Limit functionals for ``Z`` trajectories on the path grid.

    ``z_path`` is ``(len(grid), J + 1)`` for one trajectory or
    ``(len(grid), n_paths, J + 1)`` for a batch.  The regressor integrals
    are perturbed to first order,
    ``dU_j = int sum_i dU_j/dx_i (rho(s)) Z_i(s) ds`` (Simpson), and the
    normal-equation coefficients with them; ``I, J, K`` and the limit
    vector follow from differentiating the 2x2 solve.
    """
    convention = path.convention if convention is None else convention
    z = np.asarray(z_path, dtype=float)
    single = z.ndim == 2
    if single:
        z = z[:, None, :]
    n = path.J + 1
    if z.shape[0] != path.grid.size or z.shape[2] != n:
        raise ValueError("z_path must lie on the path grid with J + 1 levels")
    c = coefficients_from_path(path, convention) if coefficients is None else coefficients
    ubar = time_average(path, "U")
    vbar = time_average(path, "V", convention)
    du = np.stack([du_matrix(r) for r in path.states])          # (t, n+1, n)
    dU = simpson(np.einsum("tjn,tpn->tpj", du, z), x=path.grid, axis=0)  # (P, n+1)
    dV = simpson(z, x=path.grid, axis=0) @ dv_matrix(n, convention).T
    drho = pad(path.states[-1] - path.states[0], n + 1)
    dz = np.pad(z[-1] - z[0], ((0, 0), (0, 1)))
    db1 = dU @ drho + dz @ ubar
    db2 = dV @ drho + dz @ vbar
    da11 = 2.0 * dU @ ubar
    da22 = 2.0 * dV @ vbar
    da12 = dU @ vbar + dV @ ubar
    a11, a12, a22, b1, b2 = c.a11, c.a12, c.a22, c.b1, c.b2
    det = c.det
    I = a22 * db1 + b1 * da22 - b2 * da12 - a12 * db2
    J = a11 * db2 + b2 * da11 - b1 * da12 - a12 * db1
    K = -(a11 * da22 + a22 * da11 - 2.0 * a12 * da12)
    lim1 = (det * I + (a22 * b1 - a12 * b2) * K) / det**2
    lim2 = (det * J + (a11 * b2 - a12 * b1) * K) / det**2
    if single:
        I, J, K, lim1, lim2 = (float(v[0]) for v in (I, J, K, lim1, lim2))
    return LimitLawSample(I, J, K, lim1, lim2)


def limit_law_samples(path: MeanFieldPath, p: Params, n_samples: int, seed=0,
                      chunk: int = 500) -> LimitLawSample:
    """``n_samples`` limit-law draws (``Z(0) = 0``), sampled in chunks to bound memory."""
    c = coefficients_from_path(path)
    parts = []
    for i, start in enumerate(range(0, n_samples, chunk)):
        size = min(chunk, n_samples - start)
        z = sample_z_paths(path, p, size, seed=(*seed_tuple(seed), i))
        parts.append(limit_law_sample(path, p, z, coefficients=c))
    return LimitLawSample(*(np.concatenate([getattr(s, f) for s in parts])
                            for f in ("I", "J", "K", "lim1", "lim2")))


def write_covariance_csv(covs, dest) -> Path:
    """Long-form ``t,i,j,sigma`` export of one or more covariance matrices."""
    covs = [covs] if isinstance(covs, CovarianceMatrix) else covs
    dest = Path(dest)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "i", "j", "sigma"])
        for cov in covs:
            for i, row in enumerate(cov.sigma):
                for j, v in enumerate(row):
                    w.writerow([format(cov.t, ".17g"), i, j, format(v, ".17g")])
    return dest


def write_limit_law_csv(sample: LimitLawSample, dest) -> Path:
    dest = Path(dest)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "I", "J", "K", "lim1", "lim2"])
        cols = [np.atleast_1d(getattr(sample, f)) for f in ("I", "J", "K", "lim1", "lim2")]
        for k, vals in enumerate(zip(*cols)):
            w.writerow([k, *(format(v, ".17g") for v in vals)])
    return dest
