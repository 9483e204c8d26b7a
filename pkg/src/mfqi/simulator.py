"""Exact simulation of the N-server power-of-L system over queue-length counts.

Queues of equal length are exchangeable, so the vector of counts per length is
a Markov chain.  From counts ``c`` the total event rate is
``R = N lam + nu (N - c_0)``.  An arrival samples ``L`` queues uniformly with
replacement and joins the shortest, so it lands on a queue of length ``j`` with
probability ``S_j^L - S_{j+1}^L`` (``S_j`` = fraction of queues of length
``>= j``).  A departure leaves a level ``j >= 1`` queue with probability
proportional to ``c_j``.

Random numbers come from numpy's counter-based Philox generator.  A seed is
either an int or a tuple ``(entropy, k1, k2, ...)``; the tuple maps to
``SeedSequence(entropy, spawn_key=(k1, k2, ...))``, which is the same key
layout ``SeedSequence.spawn`` uses.  Replication ``r`` of a base seed ``b`` is
``(b, r)``.  Each event consumes two uniforms: holding time by inversion and a
selector that decides event type and level.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numba
import numpy as np

from .core import CONSERVING, Params, StateCounts, check_convention

_DONE, _NEED_UNIFORMS, _NEED_LEVELS = 0, 1, 2

# uniforms are drawn in blocks of at most this many events; levels start at this capacity
BLOCK_CAP = 1 << 21
MIN_LEVELS = 16


@dataclass
class ObservationSet:
    """Empirical measures at ``t_k = kT/m`` (k = 1..m) plus the initial state.

    Measures are held as integer counts; ``measures`` divides by ``N``.
    """

    params: Params
    N: int
    m: int
    counts: np.ndarray          # (m, levels) counts at t_1..t_m
    initial_counts: np.ndarray  # (levels,) counts at t = 0
    seed: tuple = ()
    convention: str = CONSERVING
    events: int = 0

    @property
    def T(self) -> float:
        return self.params.T

    @property
    def grid(self) -> np.ndarray:
        return observation_grid(self.params.T, self.m)

    @property
    def measures(self) -> np.ndarray:
        return self.counts / self.N

    @property
    def initial(self) -> np.ndarray:
        return self.initial_counts / self.N

    @property
    def terminal(self) -> np.ndarray:
        return self.counts[-1] / self.N

    @property
    def levels(self) -> int:
        return self.counts.shape[1]

    def trimmed(self) -> "ObservationSet":
        """Copy with trailing all-zero levels removed (at least one level kept)."""
        used = np.flatnonzero(self.counts.any(axis=0) | _pad1(self.initial_counts, self.levels).astype(bool))
        top = int(used[-1]) + 1 if used.size else 1
        return ObservationSet(self.params, self.N, self.m, self.counts[:, :top].copy(),
                              _pad1(self.initial_counts, top)[:top].copy(), self.seed,
                              self.convention, self.events)

    def sidecar(self) -> dict:
        return {"N": self.N, "m": self.m, "T": self.params.T, "lambda": self.params.lam,
                "nu": self.params.nu, "L": self.params.L, "seed": list(self.seed),
                "convention": self.convention}


def _pad1(a, n):
    a = np.asarray(a)
    return a if a.size >= n else np.concatenate([a, np.zeros(n - a.size, dtype=a.dtype)])


def observation_grid(T: float, m: int) -> np.ndarray:
    """``t_k = k T / m`` for ``k = 1..m``; the last point is exactly ``T``."""
    g = np.arange(1, m + 1, dtype=float) * T / m
    g[-1] = T
    return g


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (int, np.integer)):
        return np.random.SeedSequence(int(seed))
    seed = tuple(int(s) for s in seed)
    if not seed:
        raise ValueError("empty seed tuple")
    return np.random.SeedSequence(seed[0], spawn_key=seed[1:])


def seed_tuple(seed) -> tuple:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def derive_seed(base_seed, *keys: int) -> tuple:
    """Seed for a child stream: the base seed's key extended by ``keys``."""
    return seed_tuple(base_seed) + tuple(int(k) for k in keys)


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed)))


@numba.njit(cache=True)
def _run(counts, obs, grid, state, uniforms, lam, nu, L, N, T, max_events):
    """Advance the chain; ``state = [t, obs_index, uniform_pos, events]``.

    Returns a status: done, out of uniforms, or an arrival would overflow
    the level capacity.  In the last two cases nothing of the pending event
    has been applied, so the caller can refill/grow and call again.
    """
    t = state[0]
    k = int(state[1])
    pos = int(state[2])
    events = int(state[3])
    m = grid.shape[0]
    cap = counts.shape[0]
    nlam = N * lam
    inv_l = 1.0 / L
    status = 0
    while True:
        if events >= max_events:
            t_new = math.inf
            arrival = False
            level = 0
        else:
            busy = N - counts[0]
            rate = nlam + nu * busy
            if rate <= 0.0:
                t_new = math.inf
                arrival = False
                level = 0
            else:
                if pos + 2 > uniforms.shape[0]:
                    status = 1
                    break
                t_new = t - math.log(1.0 - uniforms[pos]) / rate
                a = uniforms[pos + 1] * rate
                if a < nlam:
                    arrival = True
                    # min of L uniform picks: position V with P(V < y) = y^L
                    y = (a / nlam) ** inv_l * N
                    level = 0
                    cum = counts[0]
                    while N - cum > y:
                        level += 1
                        cum += counts[level]
                    if level + 1 >= cap:
                        status = 2
                        break
                else:
                    arrival = False
                    d = (a - nlam) / nu
                    level = 1
                    cum = counts[1]
                    while cum <= d and level + 1 < cap:
                        level += 1
                        cum += counts[level]
                    while counts[level] == 0:  # rounding at the upper edge
                        level -= 1
        while k < m and grid[k] < t_new:
            for j in range(cap):
                obs[k, j] = counts[j]
            k += 1
        if t_new > T:
            status = 0
            break
        counts[level] -= 1
        if arrival:
            counts[level + 1] += 1
        else:
            counts[level - 1] += 1
        t = t_new
        pos += 2
        events += 1
    state[0] = t
    state[1] = k
    state[2] = pos
    state[3] = events
    return status


def simulate(p: Params, N: int, initial: StateCounts | None = None, m: int = 1,
             seed=0, max_events: int | None = None,
             convention: str = CONSERVING) -> ObservationSet:
    """Simulate on ``[0, T]`` and record the counts at ``t_k = kT/m``.

    Each observation is the state after every event with time ``<= t_k``.
    ``max_events`` freezes the chain after that many events (test hook for
    single-jump statistics).  ``convention`` is only recorded in the output.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if N < 1:
        raise ValueError("N must be >= 1")
    check_convention(convention)
    if initial is None:
        initial = StateCounts.empty(N)
    if initial.N != N:
        raise ValueError(f"initial state has N={initial.N}, expected {N}")
    init = np.asarray(initial.counts, dtype=np.int64)
    cap = max(init.size + 8, MIN_LEVELS)
    counts = np.zeros(cap, dtype=np.int64)
    counts[: init.size] = init
    grid = observation_grid(p.T, m)
    obs = np.zeros((m, cap), dtype=np.int64)
    state = np.array([0.0, 0.0, 0.0, 0.0])
    rng = make_rng(seed)
    expected = (N * p.lam + N * p.nu) * p.T
    block = int(min(max(2 * expected + 64, 1024), BLOCK_CAP))
    limit = np.iinfo(np.int64).max if max_events is None else int(max_events)
    block = min(block, limit + 1)
    uniforms = rng.random(2 * block)
    while True:
        status = _run(counts, obs, grid, state, uniforms, float(p.lam), float(p.nu),
                      p.L, N, float(p.T), limit)
        if status == _DONE:
            break
        if status == _NEED_UNIFORMS:
            rest = uniforms[int(state[2]):]
            uniforms = np.concatenate([rest, rng.random(2 * block)])
            state[2] = 0.0
        else:
            cap *= 2
            counts = np.concatenate([counts, np.zeros(cap - counts.size, dtype=np.int64)])
            obs = np.concatenate([obs, np.zeros((m, cap - obs.shape[1]), dtype=np.int64)], axis=1)
    top = max(int(np.flatnonzero(obs.any(axis=0))[-1]) + 1 if obs.any() else 1, init.size)
    return ObservationSet(p, N, m, obs[:, :top].copy(), _pad1(init, top).copy(),
                          seed_tuple(seed) if not isinstance(seed, np.random.SeedSequence) else (),
                          convention, int(state[3]))


def replicate(p: Params, N: int, initial: StateCounts | None, m: int, base_seed,
              count: int, **kwargs) -> Iterator[ObservationSet]:
    """Independent replications; replication ``r`` uses seed ``derive_seed(base_seed, r)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    for r in range(count):
        yield simulate(p, N, initial, m, derive_seed(base_seed, r), **kwargs)


# -- serialization -----------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_observations(obs: ObservationSet, prefix, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (``k,t,j,rho``, non-zero levels only) and ``<prefix>.json``.

    Row ``k = 0`` holds the initial state at ``t = 0``.
    """
    prefix = Path(prefix)
    csv_path = prefix.with_suffix(".csv")
    json_path = prefix.with_suffix(".json")
    grid = obs.grid
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t", "j", "rho"])
        for j in np.flatnonzero(obs.initial_counts):
            w.writerow([0, _fmt(0.0), int(j), _fmt(obs.initial_counts[j] / obs.N)])
        for k in range(obs.m):
            row = obs.counts[k]
            for j in np.flatnonzero(row):
                w.writerow([k + 1, _fmt(grid[k]), int(j), _fmt(row[j] / obs.N)])
    meta = obs.sidecar()
    if extra:
        meta.update(extra)
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


class DatasetError(ValueError):
    """Malformed observation files; ``where`` names the file and line."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


def read_observations(prefix) -> ObservationSet:
    prefix = Path(prefix)
    csv_path = prefix.with_suffix(".csv")
    json_path = prefix.with_suffix(".json")
    try:
        meta = json.loads(json_path.read_text())
        N, m = int(meta["N"]), int(meta["m"])
        p = Params(float(meta["lambda"]), float(meta["nu"]), int(meta["L"]), float(meta["T"]))
    except FileNotFoundError:
        raise DatasetError("missing sidecar", str(json_path)) from None
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"bad sidecar ({exc})", str(json_path)) from None
    rows: dict[int, dict[int, float]] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["k", "t", "j", "rho"]:
            raise DatasetError(f"expected header k,t,j,rho, got {header}", f"{csv_path}:1")
        for lineno, rec in enumerate(reader, start=2):
            where = f"{csv_path}:{lineno}"
            if len(rec) != 4:
                raise DatasetError(f"expected 4 fields, got {len(rec)}", where)
            try:
                k, j, rho = int(rec[0]), int(rec[2]), float(rec[3])
                float(rec[1])
            except ValueError as exc:
                raise DatasetError(str(exc), where) from None
            if not (0 <= k <= m) or j < 0 or not (0.0 <= rho <= 1.0):
                raise DatasetError("value out of range", where)
            rows.setdefault(k, {})[j] = rho
    missing = [k for k in range(m + 1) if k not in rows]
    if missing:
        raise DatasetError(f"no rows for observation k={missing[0]} (file truncated?)", str(csv_path))
    top = max(max(r) for r in rows.values()) + 1
    counts = np.zeros((m + 1, top), dtype=np.int64)
    for k, r in rows.items():
        for j, rho in r.items():
            counts[k, j] = round(rho * N)
    bad = np.flatnonzero(counts.sum(axis=1) != N)
    if bad.size:
        raise DatasetError(f"measure at k={bad[0]} does not sum to 1", str(csv_path))
    seed = tuple(meta.get("seed") or ())
    return ObservationSet(p, N, m, counts[1:], counts[0], seed,
                          meta.get("convention", CONSERVING), int(meta.get("events", 0)))
