"""Least-squares estimation of ``(lam, nu)`` from observed empirical measures.

Fitting ``rho(T) - rho(0) = lam * int U(rho) + nu * int V(rho)`` level by level
gives the 2x2 normal equations

    [a11 a12] [lam]   [b1]
    [a12 a22] [nu ] = [b2]

with ``a11 = sum_j Ubar_j^2``, ``a12 = sum_j Ubar_j Vbar_j``,
``a22 = sum_j Vbar_j^2``, ``b1 = sum_j (rho_j(T) - rho_j(0)) Ubar_j`` and ``b2``
likewise with ``Vbar``.  From data, ``Ubar_j = (T/m) sum_k U_j(rho^N(t_k))``
(right-endpoint Riemann sum); on a mean-field path the integrals are taken
by Simpson's rule instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CONSERVING, check_convention, pad, u_values, v_values
from .meanfield import MeanFieldPath, integrate_levels, time_average
from .simulator import ObservationSet

DET_THRESHOLD = 1e-10


@dataclass(frozen=True)
class LseCoefficients:
    a11: float
    a12: float
    a22: float
    b1: float
    b2: float
    J_used: int

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a12

    @property
    def det_ratio(self) -> float:
        scale = self.a11 * self.a22
        return self.det / scale if scale > 0 else 0.0


@dataclass(frozen=True)
class Diagnostics:
    """Time integrals of the three lowest occupancies and the two sufficient conditions.

    ``cond_a``: ``int rho_1 > int rho_0 > 0``;
    ``cond_b``: ``int rho_0 > int rho_1 > int rho_2 > 0``.
    """

    int_rho0: float
    int_rho1: float
    int_rho2: float
    cond_a: bool
    cond_b: bool
    det_ratio: float
    det_ok: bool

    @property
    def holds(self) -> str | None:
        return "a" if self.cond_a else "b" if self.cond_b else None


class IllPosed(ArithmeticError):
    """Normal-equation determinant at or below the relative threshold."""

    def __init__(self, coefficients: LseCoefficients, diagnostics: Diagnostics | None = None):
        super().__init__(
            f"ill-posed least squares: det/(a11*a22) = {coefficients.det_ratio:.3g}")
        self.coefficients = coefficients
        self.diagnostics = diagnostics


@dataclass
class EstimateReport:
    lambda_hat: float | None
    nu_hat: float | None
    coefficients: LseCoefficients
    wellposed: Diagnostics
    convention: str
    N: int
    m: int
    T: float
    seed: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.lambda_hat is not None

    def to_json(self) -> dict:
        c = self.coefficients
        out = {
            "lambda_hat": self.lambda_hat, "nu_hat": self.nu_hat,
            "a11": c.a11, "a12": c.a12, "a22": c.a22, "b1": c.b1, "b2": c.b2,
            "det": c.det, "det_ratio": c.det_ratio,
            "cond_a": self.wellposed.cond_a, "cond_b": self.wellposed.cond_b,
            "wellposed": self.ok,
            "convention": self.convention, "N": self.N, "m": self.m, "T": self.T,
            "seed": list(self.seed),
        }
        out.update(self.extra)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "EstimateReport":
        c = LseCoefficients(d["a11"], d["a12"], d["a22"], d["b1"], d["b2"], d.get("J_used", -1))
        diag = Diagnostics(np.nan, np.nan, np.nan, d["cond_a"], d["cond_b"], d["det_ratio"],
                           d["lambda_hat"] is not None)
        known = {"lambda_hat", "nu_hat", "a11", "a12", "a22", "b1", "b2", "det", "det_ratio",
                 "cond_a", "cond_b", "wellposed", "convention", "N", "m", "T", "seed"}
        return cls(d["lambda_hat"], d["nu_hat"], c, diag, d["convention"], d["N"], d["m"],
                   d["T"], tuple(d["seed"]), {k: v for k, v in d.items() if k not in known})


def _assemble(ubar, vbar, delta, J_used) -> LseCoefficients:
    return LseCoefficients(
        a11=float(ubar @ ubar), a12=float(ubar @ vbar), a22=float(vbar @ vbar),
        b1=float(delta @ ubar), b2=float(delta @ vbar), J_used=J_used)


def riemann_coefficients(measures, initial, T: float,
                         convention: str = CONSERVING) -> LseCoefficients:
    """Coefficients from measures at ``t_k = kT/m`` (rows, k = 1..m) and the ``t = 0`` state.

    Level sums run to one past the widest row: ``U_j`` and ``V_j`` vanish
    beyond, so nothing is truncated.
    """
    check_convention(convention)
    x = np.asarray(measures, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("measures must be a non-empty (m, levels) array")
    m, n = x.shape
    h = T / m
    ubar = h * u_values(x).sum(axis=0)
    vbar = h * v_values(x, convention).sum(axis=0)
    delta = pad(x[-1], n + 1) - pad(initial, n + 1)
    return _assemble(ubar, vbar, delta, n)


def coefficients_from_observations(obs: ObservationSet,
                                   convention: str = CONSERVING) -> LseCoefficients:
    """Normal-equation coefficients from data (right-endpoint Riemann sums).

    Trailing never-occupied levels are stripped first, which makes the
    result exactly invariant to zero padding.
    """
    obs = obs.trimmed()
    return riemann_coefficients(obs.measures, obs.initial, obs.T, convention)


def coefficients_from_path(path: MeanFieldPath, convention: str | None = None) -> LseCoefficients:
    """Exact-limit coefficients: Simpson time integrals along a mean-field path."""
    convention = path.convention if convention is None else convention
    ubar = time_average(path, "U")
    vbar = time_average(path, "V", convention)
    n = ubar.size
    delta = pad(path.states[-1] - path.states[0], n)
    return _assemble(ubar, vbar, delta, n - 1)


def solve_lse(c: LseCoefficients, det_threshold: float = DET_THRESHOLD) -> tuple[float, float]:
    """Explicit 2x2 inverse.  Raises :class:`IllPosed` when ``det <= threshold * a11 * a22``."""
    scale = c.a11 * c.a22
    det = c.det
    if not (scale > 0 and det > det_threshold * scale):
        raise IllPosed(c)
    lam = (c.a22 * c.b1 - c.a12 * c.b2) / det
    nu = (c.a11 * c.b2 - c.a12 * c.b1) / det
    return lam, nu


def _conditions(i0, i1, i2):
    cond_a = bool(i1 > i0 > 0)
    cond_b = bool(i0 > i1 > i2 > 0)
    return cond_a, cond_b


def wellposedness_diagnostics(source, convention: str = CONSERVING,
                              det_threshold: float = DET_THRESHOLD) -> Diagnostics:
    """Check the two sufficient conditions for a positive determinant.

    ``source`` is an :class:`ObservationSet` (Riemann sums) or a
    :class:`MeanFieldPath` (Simpson).
    """
    if isinstance(source, ObservationSet):
        h = source.T / source.m
        ints = pad(h * source.measures.sum(axis=0), 3)
        c = coefficients_from_observations(source, convention)
    elif isinstance(source, MeanFieldPath):
        ints = pad(integrate_levels(source), 3)
        c = coefficients_from_path(source, convention)
    else:
        raise TypeError("expected ObservationSet or MeanFieldPath")
    i0, i1, i2 = (float(v) for v in ints[:3])
    cond_a, cond_b = _conditions(i0, i1, i2)
    scale = c.a11 * c.a22
    det_ok = bool(scale > 0 and c.det > det_threshold * scale)
    return Diagnostics(i0, i1, i2, cond_a, cond_b, c.det_ratio, det_ok)


def estimate(obs: ObservationSet, convention: str = CONSERVING,
             det_threshold: float = DET_THRESHOLD) -> EstimateReport:
    """Coefficients, diagnostics and estimates; an ill-posed system yields ``None`` estimates."""
    c = coefficients_from_observations(obs, convention)
    diag = wellposedness_diagnostics(obs, convention, det_threshold)
    try:
        lam, nu = solve_lse(c, det_threshold)
    except IllPosed:
        lam = nu = None
    return EstimateReport(lam, nu, c, diag, convention, obs.N, obs.m, obs.T, tuple(obs.seed),
                          {"events": obs.events})


def estimate_from_path(path: MeanFieldPath, det_threshold: float = DET_THRESHOLD):
    return solve_lse(coefficients_from_path(path), det_threshold)
