"""Exact simulation of the two-level Moran ball-and-urn chain.

``m`` groups each hold ``n`` individuals of types G and I.  The state is the
vector of type-G counts.  Within a group with count k, G replicates at rate
``k(n-k)/n`` (count +1) and I at rate ``(1+s) k(n-k)/n`` (count -1).  At group
level every ordered pair (victim i, parent j), including i = j, fires at rate
``(w/m)(1 + r k_j/n)`` and overwrites the victim's count with the parent's.
``time_factor`` multiplies every rate, so recorded times are already in the
units of the chosen scaling regime.

The event loop lives in :mod:`twolevel.kernel`; this module wraps it and adds
exact drift and quadratic-variation functionals of ``<f, mu_t>``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernel
from .measures import GridMeasure, MeasureError, sample
from .testfunctions import TestFunction


class Absorbed(Exception):
    """Raised by :func:`gillespie_step` when no event can change the measure."""


@dataclass(frozen=True)
class ChainParams:
    m: int
    n: int
    s: float = 0.0
    r: float = 0.0
    w: float = 1.0
    time_factor: float = 1.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not (self.s >= 0 and self.r >= 0):
            raise ValueError("selection coefficients s and r must be nonnegative")
        if not self.w > 0:
            raise ValueError("w must be positive")
        if not (self.time_factor > 0 and math.isfinite(self.time_factor)):
            raise ValueError("time_factor must be positive and finite")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "n", int(self.n))

    @property
    def lam(self) -> float:
        """``w r / s``; infinite when s = 0."""
        return self.w * self.r / self.s if self.s > 0 else math.inf

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainState:
    counts: np.ndarray
    n: int
    time: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64).copy()
        if self.counts.ndim != 1 or self.counts.size == 0:
            raise ValueError("counts must be a nonempty vector")
        if np.any(self.counts < 0) or np.any(self.counts > self.n):
            raise ValueError(f"counts must lie in [0, {self.n}]")
        if self.time < 0:
            raise ValueError("time must be nonnegative")

    @property
    def m(self) -> int:
        return self.counts.size


class EventKind(enum.IntEnum):
    IndivUp = 0
    IndivDown = 1
    GroupCopy = 2


@dataclass
class EventLog:
    """Times, kinds and group indices of events.

    For individual events ``groups`` is ``(g, -1)``; for a group copy it is
    ``(victim, parent)``.
    """

    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    kinds: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int8))
    first: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    second: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self):
        return self.times.size

    def __iter__(self):
        for t, k, a, b in zip(self.times, self.kinds, self.first, self.second):
            yield float(t), EventKind(int(k)), (int(a), int(b))

    def __eq__(self, other):
        if not isinstance(other, EventLog):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("times", "kinds", "first", "second"))


@dataclass
class RateTable:
    up: np.ndarray
    down: np.ndarray
    copy_factor: np.ndarray  # (w/m)(1 + r k_j/n) for parent j, any victim

    @property
    def individual_total(self) -> float:
        return float(self.up.sum() + self.down.sum())

    @property
    def group_total(self) -> float:
        return float(self.copy_factor.sum() * self.copy_factor.size)

    @property
    def total(self) -> float:
        return self.individual_total + self.group_total

    def pair_rate(self, victim: int, parent: int) -> float:
        return float(self.copy_factor[parent])


def is_absorbed(counts: np.ndarray, n: int) -> bool:
    """All groups homogeneous and of the same type."""
    c = np.asarray(counts)
    return bool(np.all(c == c[0]) and (c[0] == 0 or c[0] == n))


def event_rates(state: ChainState, params: ChainParams) -> RateTable:
    """Per-group rates in chain time (``time_factor`` not applied)."""
    k = state.counts.astype(float)
    n = params.n
    het = k * (n - k) / n
    return RateTable(up=het, down=(1.0 + params.s) * het,
                     copy_factor=params.w / params.m * (1.0 + params.r * k / n))


def _pick(rates: np.ndarray, rng: np.random.Generator) -> int:
    """Index drawn with probability proportional to ``rates``."""
    cum = np.cumsum(rates)
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(i, rates.size - 1)


def gillespie_step(state: ChainState, params: ChainParams, rng: np.random.Generator
                   ) -> Tuple[ChainState, Tuple[float, EventKind, Tuple[int, int]]]:
    """One exact event, straightforward reference version.

    Raises :class:`Absorbed` in absorbing states.  The waiting time uses the
    total rate times ``time_factor``.
    """
    if is_absorbed(state.counts, params.n):
        raise Absorbed(f"absorbing state at t={state.time}")
    rt = event_rates(state, params)
    r_ind, r_grp = rt.individual_total, rt.group_total
    dt = rng.exponential(1.0 / (params.time_factor * (r_ind + r_grp)))
    counts = state.counts.copy()
    m = params.m
    if rng.random() * (r_ind + r_grp) < r_ind:
        idx = _pick(np.concatenate([rt.up, rt.down]), rng)
        g = idx % m
        if idx < m:
            counts[g] += 1
            ev = (EventKind.IndivUp, (g, -1))
        else:
            counts[g] -= 1
            ev = (EventKind.IndivDown, (g, -1))
    else:
        victim = int(rng.integers(m))
        parent = _pick(rt.copy_factor, rng)
        counts[victim] = counts[parent]
        ev = (EventKind.GroupCopy, (victim, parent))
    t = state.time + dt
    return ChainState(counts, params.n, t), (t, ev[0], ev[1])


def empirical_measure(state: ChainState) -> GridMeasure:
    """Mass ``#{i : counts[i] = k} / m`` at site k."""
    hist = np.bincount(state.counts, minlength=state.n + 1).astype(float)
    return GridMeasure(hist / state.m, normalize=False)


# ---------------------------------------------------------------------------
# lattice difference quotients and functionals
# ---------------------------------------------------------------------------


def lattice_differences(fv: np.ndarray, n: int):
    """``(D^+ f, D^- f, D_xx f)`` on sites 0..n; entries that would leave the
    lattice are set to zero (they always meet a zero rate)."""
    dp = np.zeros(n + 1)
    dm = np.zeros(n + 1)
    dxx = np.zeros(n + 1)
    dp[:-1] = n * (fv[1:] - fv[:-1])
    dm[1:] = n * (fv[1:] - fv[:-1])
    dxx[1:-1] = n * n * (fv[2:] - 2.0 * fv[1:-1] + fv[:-2])
    return dp, dm, dxx


def site_tables(f: TestFunction, params: ChainParams) -> np.ndarray:
    """The seven per-site rows consumed by the kernel, shape ``(7, n+1)``."""
    n = params.n
    x = np.arange(n + 1) / n
    het = x * ((n - np.arange(n + 1)) / n)
    fv = np.asarray(f(x), dtype=float)
    if not np.all(np.isfinite(fv)):
        raise ValueError(f"test function {getattr(f, 'name', f)!r} is not finite on the lattice")
    dp, dm, dxx = lattice_differences(fv, n)
    g = het * (dxx / n - params.s * dm)
    q = het * (dp * dp + (1.0 + params.s) * dm * dm) / n
    rx = 1.0 + params.r * x
    return np.stack([fv, g, x * fv, q, fv * fv, rx * fv, rx * fv * fv])


def drift_functional(state: ChainState, params: ChainParams, f: TestFunction) -> float:
    """Drift of ``<f, mu_t>`` in chain time.

    ``sum_i mu(i/n) (i/n)(1-i/n) [D_xx f/n - s D^- f] + w r (<xf> - <f><x>)``.
    """
    mu = empirical_measure(state).weights
    n = params.n
    x = np.arange(n + 1) / n
    fv = np.asarray(f(x), dtype=float)
    _, dm, dxx = lattice_differences(fv, n)
    indiv = np.sum(mu * x * (1.0 - x) * (dxx / n - params.s * dm))
    cov = np.dot(mu, x * fv) - np.dot(mu, fv) * np.dot(mu, x)
    return float(indiv + params.w * params.r * cov)


def qv_functional(state: ChainState, params: ChainParams, f: TestFunction) -> float:
    """Rate of the predictable quadratic variation of ``<f, mu_t>`` in chain time."""
    mu = empirical_measure(state).weights
    n = params.n
    x = np.arange(n + 1) / n
    fv = np.asarray(f(x), dtype=float)
    dp, dm, _ = lattice_differences(fv, n)
    indiv = np.sum(mu * x * (1.0 - x) * (dp ** 2 + (1.0 + params.s) * dm ** 2)) / n
    diff2 = (fv[:, None] - fv[None, :]) ** 2
    group = params.w * np.einsum("i,j,j,ij->", mu, mu, 1.0 + params.r * x, diff2)
    return float((indiv + group) / params.m)


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------


@dataclass
class PathRecord:
    """Observables along one path.

    ``values[o, j]`` is ``<f_o, mu>`` at ``times[j]``; ``drift_integral`` and
    ``qv_integral`` hold the exact time integrals (in recorded time) of the
    drift and QV rates from the start, and ``var_integral`` the integral of
    ``Var_mu(f)``.
    """

    params: ChainParams
    times: np.ndarray
    names: List[str]
    initial_values: np.ndarray
    values: np.ndarray
    drift_integral: np.ndarray
    qv_integral: np.ndarray
    var_integral: np.ndarray
    initial_state: ChainState
    final_state: ChainState
    n_events: int
    absorbed: bool
    events: Optional[EventLog] = None

    def index(self, f) -> int:
        if isinstance(f, int):
            return f
        name = f if isinstance(f, str) else f.name
        return self.names.index(name)

    def rows(self):
        for o, name in enumerate(self.names):
            for t, v in zip(self.times, self.values[o]):
                yield float(t), name, float(v)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["time", "observable_id", "value"])
            for t, name, v in self.rows():
                wr.writerow([repr(t), name, repr(v)])


def initial_counts(initial: GridMeasure, params: ChainParams, rng: np.random.Generator) -> np.ndarray:
    if initial.n != params.n:
        raise MeasureError(f"initial measure lives on n={initial.n}, chain has n={params.n}")
    return sample(initial, params.m, rng)


def _lattice_means(rows: np.ndarray, counts: np.ndarray, n: int) -> np.ndarray:
    """Site-ordered sums ``sum_k occ[k] row[k] / m``, accumulated exactly as the
    kernel does so that ``M_0`` is identically zero."""
    occ = np.bincount(counts, minlength=n + 1).tolist()
    out = []
    for row in rows.tolist():
        acc = 0.0
        for k in range(n + 1):
            acc += occ[k] * row[k]
        out.append(acc / counts.size)
    return np.array(out, dtype=float)


def run_from_state(state: ChainState, params: ChainParams, horizon: float,
                   observables: Sequence[TestFunction], sample_times, rng: np.random.Generator,
                   record_events: bool = False, impl=None) -> PathRecord:
    """Run the kernel from an explicit state up to ``horizon``."""
    if state.n != params.n or state.m != params.m:
        raise ValueError("state does not match params")
    times = np.asarray(sample_times, dtype=float)
    if times.ndim != 1 or np.any(np.diff(times) < 0):
        raise ValueError("sample_times must be a nondecreasing vector")
    if times.size and (times[0] < state.time or times[-1] > horizon):
        raise ValueError("sample_times must lie within [state.time, horizon]")
    if horizon < state.time:
        raise ValueError("horizon precedes the current time")
    obs = list(observables)
    tables = np.stack([site_tables(f, params) for f in obs]) if obs else np.zeros((0, 7, params.n + 1))
    run = impl or kernel.run_chain
    out = run(state.counts, params.n, float(params.s), float(params.r), float(params.w),
              float(params.time_factor), float(horizon), tables, times, rng,
              record_events, float(state.time))
    init_vals = _lattice_means(tables[:, 0, :], state.counts, params.n)
    events = None
    if record_events:
        events = EventLog(*out["events"])
    return PathRecord(
        params=params, times=times, names=[getattr(f, "name", f"f{i}") for i, f in enumerate(obs)],
        initial_values=init_vals, values=out["values"], drift_integral=out["drift"],
        qv_integral=out["qv"], var_integral=out["var"], initial_state=state,
        final_state=ChainState(out["counts"], params.n, out["time"]),
        n_events=out["n_events"], absorbed=out["absorbed"], events=events)


def simulate(initial: GridMeasure, params: ChainParams, horizon: float,
             observables: Sequence[TestFunction], sample_times, rng: np.random.Generator,
             record_events: bool = False, impl=None) -> PathRecord:
    """Sample i.i.d. initial counts from ``initial`` and run to ``horizon``."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    counts = initial_counts(initial, params, rng)
    return run_from_state(ChainState(counts, params.n), params, horizon, observables,
                          sample_times, rng, record_events, impl)


def martingale_residual(path: PathRecord, f) -> np.ndarray:
    """``M_t = <f, mu_t> - <f, mu_0> - int_0^t a(f)`` at the sample times."""
    o = path.index(f)
    if path.values.shape[1] != path.times.size:
        raise ValueError("observable and sample grids do not match")
    return path.values[o] - path.initial_values[o] - path.drift_integral[o]


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def replica_rng(seed: int, index: int, key: Tuple[int, ...] = ()) -> np.random.Generator:
    """Independent stream for replica ``index`` of master ``seed``.

    ``key`` separates families of replicas (e.g. ladder rungs) under one seed.
    """
    spawn = tuple(int(k) for k in key) + (int(index),)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))


@dataclass
class Ensemble:
    params: ChainParams
    seed: int
    key: Tuple[int, ...]
    horizon: float
    times: np.ndarray
    names: List[str]
    initial_values: np.ndarray  # (R, K)
    values: np.ndarray          # (R, K, S)
    drift_integral: np.ndarray
    qv_integral: np.ndarray
    var_integral: np.ndarray
    final_counts: np.ndarray    # (R, m)
    n_events: np.ndarray
    absorbed: np.ndarray

    @property
    def replicas(self) -> int:
        return self.values.shape[0]

    def residuals(self) -> np.ndarray:
        """Martingale residuals, shape (R, K, S)."""
        return self.values - self.initial_values[:, :, None] - self.drift_integral

    def manifest(self) -> dict:
        return {"params": self.params.to_dict(), "seed": int(self.seed), "stream_key": list(self.key),
                "replicas": self.replicas,
                "horizon": self.horizon, "sample_times": self.times.tolist(),
                "observables": self.names,
                "rng": "numpy PCG64, replica i seeded by SeedSequence(seed, spawn_key=key + (i,))",
                "kernel": kernel.IMPLEMENTATION}

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2)


def _run_replica(args):
    initial, params, horizon, observables, times, seed, key, i = args
    p = simulate(initial, params, horizon, observables, times, replica_rng(seed, i, key))
    return (p.initial_values, p.values, p.drift_integral, p.qv_integral, p.var_integral,
            p.final_state.counts, p.n_events, p.absorbed)


def run_ensemble(initial: GridMeasure, params: ChainParams, horizon: float,
                 observables: Sequence[TestFunction], sample_times, replicas: int, seed: int,
                 workers: int = 1, key: Tuple[int, ...] = ()) -> Ensemble:
    """Independent replicas; replica i uses :func:`replica_rng` (seed, i, key).

    Results do not depend on ``workers``.
    """
    if replicas < 1:
        raise ValueError("replicas must be at least 1")
    times = np.asarray(sample_times, dtype=float)
    jobs = [(initial, params, horizon, list(observables), times, seed, tuple(key), i)
            for i in range(replicas)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            res = list(ex.map(_run_replica, jobs, chunksize=max(1, replicas // (4 * workers))))
    else:
        res = [_run_replica(j) for j in jobs]
    cols = list(zip(*res))
    return Ensemble(params=params, seed=int(seed), key=tuple(int(k) for k in key),
                    horizon=float(horizon), times=times,
                    names=[getattr(f, "name", f"f{i}") for i, f in enumerate(observables)],
                    initial_values=np.array(cols[0]), values=np.array(cols[1]),
                    drift_integral=np.array(cols[2]), qv_integral=np.array(cols[3]),
                    var_integral=np.array(cols[4]), final_counts=np.array(cols[5]),
                    n_events=np.array(cols[6]), absorbed=np.array(cols[7]))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("TWOLEVEL_WORKERS", "1")))
    except ValueError:
        return 1
