"""Model parameters and the algebraic operators of the supermarket model.

Every state vector here is a plain 1-d numpy array indexed by queue length
``j = 0..J``; entries past the end are implicitly zero.  Functions that
produce level-indexed output return one more entry than their input (level
``J + 1``), because an arrival to the top occupied level lands there.

Two conventions exist for the service term at level 0:

``"conserving"`` (default)
    ``V_0(x) = x_1``.  Departures only leave non-empty queues, so the drift
    sums to zero and mass stays on the simplex.
``"literal"``
    ``V_0(x) = x_1 - x_0`` for every level, exactly as the regression
    function is usually written.  The drift then sums to ``-nu * x_0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CONSERVING = "conserving"
LITERAL = "literal"
CONVENTIONS = (CONSERVING, LITERAL)

SIMPLEX_TOL = 1e-12
ZERO_SUM_TOL = 1e-10


@dataclass(frozen=True)
class Params:
    """Arrival rate ``lam``, service rate ``nu``, choice count ``L``, horizon ``T``.

    Rates may be zero (degenerate pure-birth / pure-death studies); they may
    not be negative.
    """

    lam: float
    nu: float
    L: int = 2
    T: float = 10.0

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lam must be a finite non-negative rate, got {self.lam}")
        if not (self.nu >= 0 and math.isfinite(self.nu)):
            raise ValueError(f"nu must be a finite non-negative rate, got {self.nu}")
        if int(self.L) != self.L or self.L < 2:
            raise ValueError(f"L must be an integer >= 2, got {self.L}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"T must be positive, got {self.T}")
        object.__setattr__(self, "L", int(self.L))

    @property
    def theta(self) -> tuple[float, float]:
        return (self.lam, self.nu)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "nu": self.nu, "L": self.L, "T": self.T}


@dataclass(frozen=True)
class StateCounts:
    """Number of queues at each length; the sufficient state of the N-server chain."""

    counts: np.ndarray
    N: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise ValueError("counts must be a non-empty 1-d array")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        if int(counts.sum()) != self.N:
            raise ValueError(f"counts sum to {int(counts.sum())}, expected N={self.N}")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, N: int) -> "StateCounts":
        """All N queues empty."""
        return cls(np.array([N], dtype=np.int64), N)

    @classmethod
    def from_measure(cls, rho, N: int) -> "StateCounts":
        """Round ``N * rho`` to integers; ``rho`` must be a multiple of ``1/N``."""
        rho = np.asarray(rho, dtype=float)
        counts = np.rint(rho * N).astype(np.int64)
        if np.abs(counts - rho * N).max() > 1e-6:
            raise ValueError("measure is not a multiple of 1/N")
        return cls(counts, N)

    def measure(self) -> np.ndarray:
        return self.counts / self.N


def check_convention(convention: str) -> str:
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    return convention


def as_simplex(x, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate and return ``x`` as a float array on the probability simplex."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("simplex vector must be a non-empty 1-d array")
    if (x < 0).any():
        raise ValueError("simplex vector has negative entries")
    if abs(x.sum() - 1.0) > tol:
        raise ValueError(f"simplex vector sums to {x.sum()!r}")
    return x


def as_zero_sum(x, tol: float = ZERO_SUM_TOL) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("zero-sum vector must be 1-d")
    if abs(x.sum()) > tol:
        raise ValueError(f"vector sums to {x.sum()!r}, expected 0")
    return x


def support_top(x) -> int:
    """Largest index with a non-zero entry (0 for the all-zero vector)."""
    nz = np.flatnonzero(np.asarray(x))
    return int(nz[-1]) if nz.size else 0


def pad(x, n: int) -> np.ndarray:
    """Zero-pad (or trim) the last axis of ``x`` to length ``n``."""
    x = np.asarray(x, dtype=float)
    k = x.shape[-1]
    if k >= n:
        return x[..., :n]
    widths = [(0, 0)] * (x.ndim - 1) + [(0, n - k)]
    return np.pad(x, widths)


def tail_sums(x) -> np.ndarray:
    """``S_j = sum_{i >= j} x_i`` for ``j = 0..n`` (last axis), with ``S_n = 0``.

    One backward cumulative sum; works on stacked vectors.
    """
    x = np.asarray(x, dtype=float)
    s = np.cumsum(x[..., ::-1], axis=-1)[..., ::-1]
    return np.concatenate([s, np.zeros(x.shape[:-1] + (1,))], axis=-1)


def _shifted(x):
    """Return ``(x_{j-1}, x_j, x_{j+1}, S_j, S_{j+1})`` for ``j = 0..n``."""
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    z1 = np.zeros(lead + (1,))
    S = tail_sums(x)
    xj = np.concatenate([x, z1], axis=-1)
    xm1 = np.concatenate([z1, x], axis=-1)
    xp1 = np.concatenate([x[..., 1:], z1, z1], axis=-1)
    Sp1 = np.concatenate([S[..., 1:], z1], axis=-1)
    return xm1, xj, xp1, S, Sp1


def u_values(x) -> np.ndarray:
    """Arrival regressor ``U_j(x)`` for ``j = 0..n``; stacked input allowed.

    ``U_j = 2 x_{j-1} S_j - 2 x_j S_{j+1} + x_{j-1}^2 - x_j^2`` with
    ``x_{-1} = 0``.  Beyond level ``n`` every ``U_j`` is zero.
    """
    xm1, xj, _, S, Sp1 = _shifted(x)
    return 2.0 * xm1 * S - 2.0 * xj * Sp1 + xm1 * xm1 - xj * xj


def v_values(x, convention: str = CONSERVING) -> np.ndarray:
    """Service regressor ``V_j(x)`` for ``j = 0..n``."""
    check_convention(convention)
    _, xj, xp1, _, _ = _shifted(x)
    v = xp1 - xj
    if convention == CONSERVING:
        v[..., 0] = xp1[..., 0]
    return v


def u_regressor(x, j: int) -> float:
    x = np.asarray(x, dtype=float)
    if j < 0:
        raise ValueError("level must be non-negative")
    if j > x.size:
        return 0.0
    return float(u_values(x)[j])


def v_regressor(x, j: int, convention: str = CONSERVING) -> float:
    x = np.asarray(x, dtype=float)
    if j < 0:
        raise ValueError("level must be non-negative")
    if j > x.size:
        return 0.0
    return float(v_values(x, convention)[j])


def drift(x, p: Params, convention: str = CONSERVING) -> np.ndarray:
    """Mean-field drift ``F(x)`` over levels ``0..n`` (one past the input).

    Uses ``lam * U + nu * V`` when ``L == 2`` and the binomial form otherwise.
    """
    if p.L == 2:
        return p.lam * u_values(x) + p.nu * v_values(x, convention)
    return drift_binomial(x, p, convention)


def drift_binomial(x, p: Params, convention: str = CONSERVING) -> np.ndarray:
    """Drift written as the binomial sum over the number of picks at a level.

    The arrival term at level ``j`` is
    ``sum_i C(L,i) x_{j-1}^i S_j^{L-i} - sum_i C(L,i) x_j^i S_{j+1}^{L-i}``.
    """
    xm1, xj, _, S, Sp1 = _shifted(x)
    arrive = np.zeros_like(xj)
    for i in range(1, p.L + 1):
        c = math.comb(p.L, i)
        arrive += c * xm1**i * S ** (p.L - i) - c * xj**i * Sp1 ** (p.L - i)
    return p.lam * arrive + p.nu * v_values(x, convention)


def du_regressor(x, j: int, l: int) -> float:
    """Partial derivative of ``U_j`` with respect to ``x_l``."""
    x = np.asarray(x, dtype=float)
    if j < 0 or l < 0:
        raise ValueError("levels must be non-negative")
    n = max(x.size, j + 2, l + 1)
    x = pad(x, n)
    S = tail_sums(x)
    xm1 = x[j - 1] if j >= 1 else 0.0
    if l < j - 1:
        return 0.0
    if l == j - 1:
        return 2.0 * S[j - 1]
    if l == j:
        return 2.0 * xm1 - 2.0 * S[j]
    return 2.0 * xm1 - 2.0 * x[j]


def dv_regressor(j: int, l: int, convention: str = CONSERVING) -> float:
    check_convention(convention)
    if j < 0 or l < 0:
        raise ValueError("levels must be non-negative")
    if l == j + 1:
        return 1.0
    if l == j:
        return 0.0 if (j == 0 and convention == CONSERVING) else -1.0
    return 0.0


def du_matrix(x) -> np.ndarray:
    """Jacobian ``D[j, l] = dU_j/dx_l`` for ``j = 0..n``, ``l = 0..n-1``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xm1, xj, _, S, _ = _shifted(x)
    Sm1 = np.concatenate([[S[0]], S[:-1]])  # S_{j-1}; unused at j = 0
    j = np.arange(n + 1)[:, None]
    l = np.arange(n)[None, :]
    out = np.where(l == j - 1, 2.0 * Sm1[:, None], 0.0)
    out = np.where(l == j, (2.0 * xm1 - 2.0 * S)[:, None], out)
    out = np.where(l >= j + 1, (2.0 * xm1 - 2.0 * xj)[:, None], out)
    return out


def dv_matrix(n: int, convention: str = CONSERVING) -> np.ndarray:
    """Jacobian ``dV_j/dx_l`` for ``j = 0..n``, ``l = 0..n-1``."""
    check_convention(convention)
    out = np.zeros((n + 1, n))
    idx = np.arange(n)
    out[idx, idx] = -1.0
    out[idx[:-1], idx[:-1] + 1] = 1.0
    if convention == CONSERVING:
        out[0, 0] = 0.0
    return out


def g_linearized(x, s, p: Params, convention: str = CONSERVING,
                 cross_only: bool = False) -> np.ndarray:
    """Directional derivative of the drift at ``s`` along ``x`` (levels ``0..n``).

    With ``cross_only=True`` the arrival part is the two-term closed form
    ``2 lam sum_{m>=j} [x_{j-1} s_m + s_{j-1} x_m - x_j s_{m+1} - s_j x_{m+1}]``,
    which differentiates only the cross products of ``U_j`` and omits
    ``2 lam (s_{j-1} x_{j-1} - s_j x_j)``.  It is kept for comparison; it is
    not the derivative of the drift.
    """
    _require_l2(p)
    n = max(np.size(x), np.size(s))
    x = pad(x, n)
    s = pad(s, n)
    if cross_only:
        xm1, xj, _, X, Xp1 = _shifted(x)
        sm1, sj, _, S, Sp1 = _shifted(s)
        arrive = 2.0 * (xm1 * S + sm1 * X - xj * Sp1 - sj * Xp1)
    else:
        arrive = du_matrix(s) @ x
    return p.lam * arrive + p.nu * (dv_matrix(n, convention) @ x)


def jacobian(s, p: Params, convention: str = CONSERVING) -> np.ndarray:
    """Square matrix of ``x -> G(x, s)`` restricted to levels ``0..n-1``."""
    _require_l2(p)
    n = np.size(s)
    return (p.lam * du_matrix(s) + p.nu * dv_matrix(n, convention))[:n, :]


def phi_matrix(s, p: Params) -> np.ndarray:
    """Diffusion operator of the fluctuation limit over levels ``0..n``.

    Arrivals move mass ``j -> j+1`` at rate ``lam (2 s_j S_{j+1} + s_j^2)``;
    departures move ``j -> j-1`` at rate ``nu s_j`` for ``j >= 1``.
    """
    _require_l2(p)
    s = np.asarray(s, dtype=float)
    n = s.size
    _, sj, _, _, Sp1 = _shifted(s)
    up = p.lam * (2.0 * sj * Sp1 + sj * sj)[:n]
    down = p.nu * s[1:]
    out = np.zeros((n + 1, n + 1))
    k = np.arange(n)
    out[k, k] += up
    out[k + 1, k + 1] += up
    out[k, k + 1] -= up
    out[k + 1, k] -= up
    k = np.arange(1, n)
    out[k - 1, k - 1] += down
    out[k, k] += down
    out[k - 1, k] -= down
    out[k, k - 1] -= down
    return out


def c_matrix_at(rho, p: Params, convention: str = CONSERVING,
                cross_only: bool = False) -> np.ndarray:
    """Banded-plus-lower-triangle matrix ``C`` with ``C x = G(x, rho)`` on zero-sum ``x``.

    Levels ``0..n-1`` with ``n = len(rho)``.  Rows are rewritten with
    ``sum_m x_m = 0`` and ``sum_m rho_m = 1``:

    ========  ==========================================================
    l <= j-2  ``-2 lam (rho_{j-1} - rho_j)``
    l = j-1   ``2 lam (1 - P_{j-2} - 2 rho_{j-1} + rho_j) [+ 2 lam rho_{j-1}]``
    l = j     ``2 lam (-1 + P_{j-1} + 2 rho_j) - nu [- 2 lam rho_j]``
    l = j+1   ``nu``
    l >= j+2  ``0``
    ========  ==========================================================

    ``P_k`` is the prefix sum ``rho_0 + ... + rho_k``.  Bracketed terms
    complete the derivative and are dropped with ``cross_only=True``; with
    the conserving convention the ``-nu`` on ``C_00`` is dropped.
    """
    _require_l2(p)
    check_convention(convention)
    rho = np.asarray(rho, dtype=float)
    n = rho.size
    lam, nu = p.lam, p.nu
    rm1 = np.concatenate([[0.0], rho[:-1]])
    P = np.cumsum(rho)
    Pm1 = np.concatenate([[0.0], P[:-1]])          # P_{j-1}
    Pm2 = np.concatenate([[0.0, 0.0], P[:-2]])[:n]  # P_{j-2}
    j = np.arange(n)[:, None]
    l = np.arange(n)[None, :]
    below = (-2.0 * lam * (rm1 - rho))[:, None]
    sub = 2.0 * lam * (1.0 - Pm2 - 2.0 * rm1 + rho)
    diag = 2.0 * lam * (-1.0 + Pm1 + 2.0 * rho) - nu
    if not cross_only:
        sub = sub + 2.0 * lam * rm1
        diag = diag - 2.0 * lam * rho
    if convention == CONSERVING:
        diag[0] += nu
    out = np.where(l <= j - 2, below, 0.0)
    out = np.where(l == j - 1, sub[:, None], out)
    out = np.where(l == j, diag[:, None], out)
    out = np.where(l == j + 1, nu, out)
    return out


def fixed_point(p: Params, J: int) -> np.ndarray:
    """Stationary point with tails ``S_j = (lam/nu)^((L^j - 1)/(L - 1))``, levels ``0..J``.

    Requires ``lam < nu``.  Mass above ``J`` is folded into level ``J``.
    """
    if not p.lam < p.nu:
        raise ValueError("stationary point needs lam < nu")
    r = p.lam / p.nu
    expo = np.array([(p.L**j - 1) // (p.L - 1) for j in range(J + 2)], dtype=float)
    with np.errstate(under="ignore"):
        S = r**expo
    x = S[:-1] - S[1:]
    x[-1] += S[-1]
    return x


def choose_truncation(p: Params, rho0=None, tol: float = 1e-14, minimum: int = 0) -> int:
    """Truncation level ``J`` for ODE work.

    Smallest ``J`` whose stationary tail bound ``(lam/nu)^((L^J-1)/(L-1))`` is
    below ``tol``, shifted up by the top occupied level of ``rho0`` (queues
    starting high still need that many further arrivals to reach the tail),
    and never below ``support(rho0) + 2`` or ``minimum``.  When
    ``lam >= nu`` there is no stationary tail; fall back to a transient bound
    of mean arrivals per queue over the horizon plus a safety margin.
    """
    top = support_top(rho0) if rho0 is not None else 0
    base = max(top + 2, minimum)
    if p.lam == 0:
        return base
    if p.lam < p.nu:
        r = p.lam / p.nu
        J = 1
        while (p.L**J - 1) / (p.L - 1) * math.log(r) >= math.log(tol):
            J += 1
        return max(J + top, base)
    return base + int(math.ceil(p.lam * p.L * p.T)) + 10


def _require_l2(p: Params):
    if p.L != 2:
        raise ValueError("fluctuation operators are implemented for L = 2 only")
