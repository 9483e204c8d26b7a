"""Fast self-checks run by ``mfqi validate``; each returns ``(name, passed, detail)``."""
from __future__ import annotations

import numpy as np

from .core import (Params, c_matrix_at, drift, du_matrix, fixed_point, g_linearized,
                   phi_matrix, u_values)
from .estimator import estimate_from_path
from .fluctuation import frozen_propagation_gap
from .meanfield import solve_ode
from .simulator import simulate

P = Params(0.5, 1.0, 2, 10.0)


def _random_simplex(rng, n):
    x = rng.random(n) ** 3
    return x / x.sum()


def _zero_sum(rng, n):
    x = rng.normal(size=n)
    return x - x.mean()


def check_fixed_point():
    r = float(np.abs(drift(fixed_point(P, 20), P)).max())
    return "fixed-point residual < 1e-8", r < 1e-8, f"{r:.2e}"


def check_pure_death():
    p = Params(0.0, 1.0, 2, 1.0)
    grid = np.linspace(0, 1, 101)
    path = solve_ode(p, [0.0, 1.0], grid, J=3)
    exact = np.exp(-grid)
    err = max(np.abs(path.states[:, 1] - exact).max(), np.abs(path.states[:, 0] - (1 - exact)).max())
    return "pure-death ODE vs analytic < 1e-8", err < 1e-8, f"{err:.2e}"


def check_ode_estimator():
    m = 100_000
    path = solve_ode(P, [1.0], np.linspace(0, P.T, m + 1))
    lam, nu = estimate_from_path(path)
    err = max(abs(lam - P.lam), abs(nu - P.nu))
    return "exact-limit coefficients recover theta* (1e-3)", err < 1e-3, f"({lam:.5f}, {nu:.5f})"


def check_mass_conservation(rng):
    worst = 0.0
    for _ in range(100):
        worst = max(worst, abs(drift(_random_simplex(rng, 8), P).sum()))
    return "drift sums to 0 (conserving)", worst <= 1e-12, f"{worst:.1e}"


def check_derivatives(rng):
    worst = 0.0
    for _ in range(20):
        x = _random_simplex(rng, 6)
        d = du_matrix(x)
        for l in range(6):
            e = np.zeros(6)
            e[l] = 1e-6
            fd = (u_values(x + e) - u_values(x - e)) / 2e-6
            worst = max(worst, float(np.abs(fd - d[:, l]).max()))
    return "dU matches finite differences", worst < 1e-6, f"{worst:.1e}"


def check_g_is_derivative(rng):
    worst = 0.0
    for _ in range(20):
        s, x, u = _random_simplex(rng, 6), _zero_sum(rng, 6), 1e-6
        fd = (drift(s + u * x, P) - drift(s - u * x, P)) / (2 * u)
        worst = max(worst, float(np.abs(g_linearized(x, s, P) - fd).max()))
    return "G matches finite differences of F", worst < 1e-6, f"{worst:.1e}"


def check_phi(rng):
    worst_row, worst_eig = 0.0, 0.0
    for _ in range(50):
        phi = phi_matrix(_random_simplex(rng, 7), P)
        worst_row = max(worst_row, float(np.abs(phi.sum(axis=1)).max()))
        worst_eig = min(worst_eig, float(np.linalg.eigvalsh(phi).min()))
    ok = worst_row <= 1e-14 and worst_eig >= -1e-12
    return "Phi zero row sums and PSD", ok, f"row {worst_row:.1e}, min eig {worst_eig:.1e}"


def check_c_matrix(rng):
    worst = 0.0
    path = solve_ode(P, [1.0], np.linspace(0, P.T, 11))
    for rho in path.states:
        C = c_matrix_at(rho, P)
        for _ in range(10):
            x = _zero_sum(rng, rho.size)
            worst = max(worst, float(np.abs(C @ x - g_linearized(x, rho, P)[: rho.size]).sum()))
    return "C(t) x = G(x, rho(t))", worst <= 1e-10, f"{worst:.1e}"


def check_frozen_exp():
    gap = frozen_propagation_gap(fixed_point(P, 6), P, [1.0, -1.0], 1.0)
    return "expm(Ct) z0 vs ODE (frozen C)", gap < 1e-8, f"{gap:.1e}"


def check_simulator_determinism():
    a = simulate(P, 200, None, 100, seed=(7,))
    b = simulate(P, 200, None, 100, seed=(7,))
    same = np.array_equal(a.counts, b.counts)
    conserved = bool(np.all(a.counts.sum(axis=1) == 200))
    return "simulator deterministic, counts conserved", same and conserved, f"{a.events} events"


def run_all(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    checks = [check_fixed_point, check_pure_death, check_ode_estimator,
              lambda: check_mass_conservation(rng), lambda: check_derivatives(rng),
              lambda: check_g_is_derivative(rng), lambda: check_phi(rng),
              lambda: check_c_matrix(rng), check_frozen_exp, check_simulator_determinism]
    out = []
    for check in checks:
        try:
            out.append(check())
        except Exception as exc:  # a crashing check is a failing check
            out.append((getattr(check, "__name__", "check"), False, f"error: {exc}"))
    return out

