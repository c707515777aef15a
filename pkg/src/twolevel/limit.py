"""Closed-form deterministic limit.

The limit measure solves a transport-plus-replication equation: mass is
carried along the characteristics ``dx/dt = -x(1-x)`` and reweighted by
``lambda (x - h(t))``, where ``h(t)`` is the mean.  Its solution is

    mu_t = Z_t^{-1} * D_t(x)**lam * (phi_t)_# mu_0,
    D_t(x) = e^{-t} + x (1 - e^{-t}),

with ``phi_t(p) = p e^{-t} / (1 - p + p e^{-t})``.  Rather than solving for
``h`` we normalise to unit mass and read ``h`` off as the mean.

Besides :func:`evolve` this module has an RK4 integrator for atoms (an
independent check), the long-time classification by tail exponent, and the
closed-form reference solutions for five standard initial conditions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .measures import (
    MASS_AT_ONE, POWER_TAIL, VANISHING_NEAR_ONE, AtomicMeasure, Beta, BetaSpec, GridDensity,
    GridMeasure, Mixture, TailDescriptor, delta, density_from_origin, integrate,
    linear_decreasing, logsumexp, mean, register_origin, truncated_uniform, uniform,
)
from .testfunctions import TestFunction, monomial


class StepSizeError(ArithmeticError):
    """RK4 step too large: a weight left [0, 1]."""


class Unclassifiable(ValueError):
    """No tail information is available for this initial measure."""


@dataclass(frozen=True)
class LimitParams:
    lam: float

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive, got {self.lam!r}")


def _check_lam(lam: float) -> float:
    return LimitParams(float(lam)).lam


def _check_t(t: float) -> float:
    t = float(t)
    if not (t >= 0 and math.isfinite(t)):
        raise ValueError(f"time must be finite and nonnegative, got {t!r}")
    return t


# ---------------------------------------------------------------------------
# flow map
# ---------------------------------------------------------------------------


def _unit(name, v):
    v = np.asarray(v, dtype=float)
    if np.any(~(v >= 0)) or np.any(~(v <= 1)):
        raise ValueError(f"{name} must lie in [0, 1]")
    return v


def phi_c(t: float, p, pc=None):
    """``(phi_t(p), 1 - phi_t(p))`` computed without cancellation."""
    t = _check_t(t)
    p = _unit("p", p)
    pc = 1.0 - p if pc is None else np.asarray(pc, dtype=float)
    e = math.exp(-t)
    den = pc + p * e
    return p * e / den, pc / den


def phi_inv_c(t: float, x, xc=None):
    """``(phi_t^{-1}(x), 1 - phi_t^{-1}(x))`` and ``D_t(x)``."""
    t = _check_t(t)
    x = _unit("x", x)
    xc = 1.0 - x if xc is None else np.asarray(xc, dtype=float)
    e = math.exp(-t)
    em1 = math.expm1(-t)
    d = np.where(x < 0.5, e - x * em1, 1.0 + xc * em1)
    return x / d, e * xc / d, d


def phi(t: float, p):
    """``p e^{-t} / (1 - p + p e^{-t})``."""
    v = phi_c(t, p)[0]
    return float(v) if np.ndim(v) == 0 else v


def phi_inv(t: float, x):
    """``x / (e^{-t} + x (1 - e^{-t}))``."""
    v = phi_inv_c(t, x)[0]
    return float(v) if np.ndim(v) == 0 else v


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------


def _transport_atoms(mu: AtomicMeasure, lam: float, t: float) -> Tuple[AtomicMeasure, float]:
    x, xc = phi_c(t, mu.positions, mu.complements)
    e = math.exp(-t)
    with np.errstate(divide="ignore"):
        logw = np.log(mu.weights) - lam * t - lam * np.log(mu.complements + mu.positions * e)
    log_mass = float(logsumexp(logw))
    return AtomicMeasure(x, np.exp(logw - log_mass), xc, normalize=True), log_mass


def _transport_density(d: GridDensity, lam: float, t: float) -> Tuple[GridDensity, float]:
    raw = d.raw_logpdf
    lo, lo_c = phi_c(t, d.lo, d.lo_c)
    hi, hi_c = phi_c(t, d.hi, d.hi_c)

    def logpdf(x, xc):
        p, pc, dx = phi_inv_c(t, x, xc)
        with np.errstate(divide="ignore"):
            return raw(p, pc) - t + (lam - 2.0) * np.log(dx) - d.log_norm

    origin = None
    if d.origin is not None:
        origin = {"transport": {"base": d.origin, "lam": lam, "t": t}}
    out = GridDensity(logpdf, (float(lo), float(hi)), (float(lo_c), float(hi_c)),
                      tail=None, origin=origin, label=f"G_{t:g}[{d.label}]")
    return out, out.log_norm


def _build_transport(o: dict) -> GridDensity:
    spec = o["transport"]
    return _transport_density(density_from_origin(spec["base"]), spec["lam"], spec["t"])[0]


register_origin("transport", _build_transport)


def _transport(mu, lam: float, t: float):
    """Transported measure with unit mass plus the log of its unnormalised mass."""
    if isinstance(mu, AtomicMeasure):
        return _transport_atoms(mu, lam, t)
    if isinstance(mu, GridMeasure):
        k = np.nonzero(mu.weights)[0]
        atoms = AtomicMeasure(k / mu.n, mu.weights[k], (mu.n - k) / mu.n, normalize=True)
        return _transport_atoms(atoms, lam, t)
    if isinstance(mu, Beta):
        if abs(mu.spec.lam - lam) <= 1e-12 * lam:
            return mu, -mu.spec.alpha * t
        return _transport_density(mu.density, lam, t)
    if isinstance(mu, GridDensity):
        return _transport_density(mu, lam, t)
    if isinstance(mu, Mixture):
        parts = [(w, *_transport(c, lam, t)) for w, c in mu.components]
        logs = np.array([math.log(w) + lm for w, _, lm in parts])
        log_mass = float(logsumexp(logs))
        weights = np.exp(logs - log_mass)
        keep = [(float(wi), m) for wi, (_, m, _) in zip(weights, parts) if wi > 0]
        return Mixture(keep, normalize=True), log_mass
    raise TypeError(f"cannot evolve {type(mu).__name__}")


@dataclass
class SolutionState:
    measure: object
    t: float
    h_history: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def h(self) -> float:
        return mean(self.measure)


def evolve(mu0, lam: float, t: float) -> SolutionState:
    """The solution at time ``t`` started from ``mu0``."""
    lam = _check_lam(lam)
    t = _check_t(t)
    if t == 0:
        state = SolutionState(mu0, 0.0)
    else:
        state = SolutionState(_transport(mu0, lam, t)[0], t)
    h_of_t(state)
    return state


def h_of_t(state: SolutionState) -> float:
    """Mean of the current measure; appended to ``state.h_history``."""
    h = mean(state.measure)
    state.h_history.append((state.t, h))
    return h


@dataclass
class Trajectory:
    lam: float
    times: np.ndarray
    states: List[SolutionState]

    @property
    def h(self) -> np.ndarray:
        return np.array([s.h_history[-1][1] for s in self.states])

    def measures(self):
        return [s.measure for s in self.states]


def trajectory(mu0, lam: float, times: Sequence[float]) -> Trajectory:
    times = np.asarray(times, dtype=float)
    return Trajectory(float(lam), times, [evolve(mu0, lam, t) for t in times])


def h_increments(traj: Trajectory) -> np.ndarray:
    """Difference quotients ``dh/dt`` between consecutive samples."""
    return np.diff(traj.h) / np.diff(traj.times)


def weak_residual(traj: Trajectory, f: TestFunction, lam: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference residual of the weak equation at interior samples.

    ``d/dt <f, mu_t> - [-<x(1-x) f', mu_t> + lam (<x f> - <f><x>)]``.
    Returns ``(times, residuals)``.
    """
    lam = traj.lam if lam is None else float(lam)
    if traj.times.size < 3:
        raise ValueError("weak_residual needs at least three samples")
    ms = traj.measures()
    # integrals are divided by the computed mass so that f = 1 gives exactly zero
    mass = [integrate(m, lambda x: np.ones_like(x)) for m in ms]
    fv = np.array([integrate(m, f) / z for m, z in zip(ms, mass)])
    t = traj.times
    dfdt = (fv[2:] - fv[:-2]) / (t[2:] - t[:-2])
    rhs = []
    for m, z in zip(ms[1:-1], mass[1:-1]):
        transport = integrate(m, lambda x: x * (1.0 - x) * f.d1(x)) / z
        cov = integrate(m, lambda x: x * f(x)) / z - (integrate(m, f) / z) * (mean(m) / z)
        rhs.append(-transport + lam * cov)
    return t[1:-1], dfdt - np.array(rhs)


# ---------------------------------------------------------------------------
# atom ODE
# ---------------------------------------------------------------------------


def evolve_atoms_ode(mu0: AtomicMeasure, lam: float, t: float, dt: float = 1e-3) -> AtomicMeasure:
    """RK4 for ``x_i' = -x_i(1-x_i)``, ``a_i' = lam a_i (x_i - sum_j a_j x_j)``."""
    lam = _check_lam(lam)
    t = _check_t(t)
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = mu0.positions.astype(float).copy()
    a = mu0.weights.astype(float).copy()

    def rhs(x, a):
        return -x * (1.0 - x), lam * a * (x - np.dot(a, x))

    steps = int(math.ceil(t / dt - 1e-9)) if t > 0 else 0
    h = t / steps if steps else 0.0
    for _ in range(steps):
        k1x, k1a = rhs(x, a)
        k2x, k2a = rhs(x + 0.5 * h * k1x, a + 0.5 * h * k1a)
        k3x, k3a = rhs(x + 0.5 * h * k2x, a + 0.5 * h * k2a)
        k4x, k4a = rhs(x + h * k3x, a + h * k3a)
        x = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        a = a + h / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a)
        if np.any(a < -1e-6) or np.any(a > 1 + 1e-6):
            raise StepSizeError(f"weights left [0, 1] with dt={dt}")
    return AtomicMeasure(np.clip(x, 0.0, 1.0), np.clip(a, 0.0, None), normalize=True)


# ---------------------------------------------------------------------------
# flux semigroup
# ---------------------------------------------------------------------------


def flux_semigroup(f: TestFunction, t: float, s: float) -> TestFunction:
    """``(P_t f)(x) = f(x e^{-st} / (1 - x + x e^{-st}))`` with chain-rule derivatives."""
    if not s > 0:
        raise ValueError("s must be positive")
    c = math.exp(-s * float(t))

    def inner(x):
        x = np.asarray(x, dtype=float)
        d = 1.0 - x + x * c
        return x * c / d, d

    def g(x):
        y, _ = inner(x)
        return f(y)

    dg = d2g = None
    if f.df is not None:
        def dg(x):
            y, d = inner(x)
            return f.d1(y) * c / d ** 2
    if f.df is not None and f.d2f is not None:
        def d2g(x):
            y, d = inner(x)
            p1 = c / d ** 2
            p2 = 2.0 * c * (1.0 - c) / d ** 3
            return f.d2(y) * p1 ** 2 + f.d1(y) * p2
    return TestFunction(g, dg, d2g, name=f"P_{t:g}[{f.name}]")


# ---------------------------------------------------------------------------
# long-time behaviour
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LongTimeLimit:
    kind: str  # "Delta0", "Delta1" or "BetaLimit"
    spec: Optional[BetaSpec] = None

    def measure(self):
        if self.kind == "Delta0":
            return delta(0.0)
        if self.kind == "Delta1":
            return delta(1.0, 0.0)
        return Beta(self.spec)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.spec is not None:
            d["beta"] = {"lambda": self.spec.lam, "alpha": self.spec.alpha,
                         "a": self.spec.a, "b": self.spec.b}
        return d

    def __str__(self):
        if self.spec is None:
            return self.kind
        return f"Beta({self.spec.a:g},{self.spec.b:g})"


def classify_longtime(tail: TailDescriptor, lam: float) -> LongTimeLimit:
    lam = _check_lam(lam)
    if tail.kind == MASS_AT_ONE:
        return LongTimeLimit("Delta1")
    if tail.kind == VANISHING_NEAR_ONE:
        return LongTimeLimit("Delta0")
    if tail.alpha < lam:
        return LongTimeLimit("BetaLimit", BetaSpec(lam, tail.alpha))
    return LongTimeLimit("Delta0")


def tail_of(mu0) -> TailDescriptor:
    """Tail descriptor of a measure whose behaviour near 1 is known."""
    if isinstance(mu0, AtomicMeasure):
        at_one = np.any(mu0.complements == 0.0)
        return TailDescriptor(MASS_AT_ONE if at_one else VANISHING_NEAR_ONE)
    if isinstance(mu0, GridMeasure):
        return TailDescriptor(MASS_AT_ONE if mu0.weights[-1] > 0 else VANISHING_NEAR_ONE)
    if isinstance(mu0, Beta):
        return TailDescriptor(POWER_TAIL, mu0.spec.alpha, mu0.spec.tail_constant())
    if isinstance(mu0, GridDensity):
        if mu0.hi_c > 0:
            return TailDescriptor(VANISHING_NEAR_ONE)
        if mu0.tail is None:
            raise Unclassifiable(f"density {mu0.label!r} carries no tail metadata")
        return mu0.tail
    if isinstance(mu0, Mixture):
        tails = [(w, tail_of(c)) for w, c in mu0.components]
        if any(t.kind == MASS_AT_ONE for _, t in tails):
            return TailDescriptor(MASS_AT_ONE)
        power = [(w, t) for w, t in tails if t.kind == POWER_TAIL]
        if not power:
            return TailDescriptor(VANISHING_NEAR_ONE)
        amin = min(t.alpha for _, t in power)
        c = sum(w * t.C for w, t in power if t.alpha == amin)
        return TailDescriptor(POWER_TAIL, amin, c)
    raise Unclassifiable(f"cannot classify {type(mu0).__name__}")


# ---------------------------------------------------------------------------
# closed-form examples
# ---------------------------------------------------------------------------


def _log_d(t: float, x, xc):
    return np.log(phi_inv_c(t, x, xc)[2])


def _power_integral(p: float, t: float) -> float:
    """``int_0^1 D_t(x)**p dx`` times ``(1 - e^{-t})``, i.e. ``int_{e^{-t}}^1 u**p du``."""
    if abs(p + 1.0) < 1e-12:
        return t
    return -math.expm1(-(p + 1.0) * t) / (p + 1.0)


def example_initial(example_id: int, lam: float = 1.0, **params):
    """Initial measure of reference example 1..5."""
    if example_id == 1:
        return delta(float(params.get("x0", 0.5)))
    if example_id == 2:
        return uniform()
    if example_id == 3:
        return linear_decreasing()
    if example_id == 4:
        return truncated_uniform(float(params.get("c", 0.8)))
    if example_id == 5:
        alpha = float(params.get("alpha", 1.0))
        a = float(params.get("a", 0.5))
        if not (0 < alpha < lam):
            raise ValueError("example 5 needs 0 < alpha < lambda")
        if not (0 <= a <= 1):
            raise ValueError("example 5 needs a mixture weight a in [0, 1]")
        return Mixture([(a, delta(0.0)), (1.0 - a, Beta(lam, alpha))])
    raise ValueError(f"unknown example {example_id!r}")


def reference_solution(example_id: int, lam: float, t: float, **params):
    """Closed-form solution of reference example 1..5 at time ``t``.

    Densities are written with their exact normalising constants; the
    quadrature normalisation in :class:`GridDensity` then only corrects
    rounding (``log_norm`` stays near 0).
    """
    lam = _check_lam(lam)
    t = _check_t(t)
    e = math.exp(-t)
    c1 = -math.expm1(-t)
    if example_id == 1:
        x0 = float(params.get("x0", 0.5))
        if not 0 <= x0 <= 1:
            raise ValueError("example 1 needs x0 in [0, 1]")
        x, xc = phi_c(t, x0)
        return AtomicMeasure([float(x)], [1.0], [float(xc)])
    if t == 0:
        return example_initial(example_id, lam, **params)
    if example_id == 2:
        # K D^(lam-2), K = (lam-1)(1-e^-t)/(1-e^-(lam-1)t); K = (1-e^-t)/t at lam = 1
        if abs(lam - 1.0) < 1e-12:
            log_k = math.log(c1 / t)
        else:
            log_k = math.log((lam - 1.0) * c1 / -math.expm1(-(lam - 1.0) * t))

        def logpdf(x, xc):
            return log_k + (lam - 2.0) * _log_d(t, x, xc)

        return GridDensity(logpdf, label=f"example2(t={t:g})")
    if example_id == 3:
        # 2(1-x) D^(lam-3) K; int_0^1 (1-x) D^(lam-3) = [I(lam-3) - I(lam-2)] / c1^2
        p = lam - 3.0
        norm = (_power_integral(p, t) - _power_integral(p + 1.0, t)) / c1 ** 2
        log_k = -math.log(2.0 * norm)

        def logpdf(x, xc):
            with np.errstate(divide="ignore"):
                return log_k + math.log(2.0) + np.log(xc) + p * _log_d(t, x, xc)

        return GridDensity(logpdf, label=f"example3(t={t:g})")
    if example_id == 4:
        c = float(params.get("c", 0.8))
        if not 0 < c < 1:
            raise ValueError("example 4 needs 0 < c < 1")
        b, bc = phi_c(t, c)
        db = float(phi_inv_c(t, b, bc)[2])
        if abs(lam - 1.0) < 1e-12:
            norm = (math.log(db) + t) / c1
        else:
            norm = (db ** (lam - 1.0) - math.exp(-(lam - 1.0) * t)) / ((lam - 1.0) * c1)
        log_k = -math.log(norm)

        def logpdf(x, xc):
            return log_k + (lam - 2.0) * _log_d(t, x, xc)

        return GridDensity(logpdf, (0.0, float(b)), (1.0, float(bc)), label=f"example4(t={t:g})")
    if example_id == 5:
        alpha = float(params.get("alpha", 1.0))
        a = float(params.get("a", 0.5))
        example_initial(5, lam, alpha=alpha, a=a)
        if a == 0:
            return Beta(lam, alpha)
        if a == 1:
            return delta(0.0)
        # weight of delta_0 is a / (a + (1-a) e^{(lam-alpha) t})
        z = math.log(a) - np.logaddexp(math.log(a), math.log1p(-a) + (lam - alpha) * t)
        w0 = math.exp(z)
        return Mixture([(w0, delta(0.0)), (1.0 - w0, Beta(lam, alpha))], normalize=True)
    raise ValueError(f"unknown example {example_id!r}")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def density_snapshot_csv(mu, path, points: Optional[np.ndarray] = None) -> None:
    """Write ``(x, eta_t(x))`` of a density (or the density parts of a mixture)."""
    if isinstance(mu, Beta):
        mu = mu.density
    if not isinstance(mu, GridDensity):
        raise TypeError("density snapshots need a density")
    x = mu.nodes if points is None else np.asarray(points, dtype=float)
    xc = mu.nodes_c if points is None else 1.0 - x
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "density"])
        for xi, v in zip(x, mu.pdf(x, xc)):
            wr.writerow([repr(float(xi)), repr(float(v))])


def classification_json(lam: float, tail: TailDescriptor, verdict: LongTimeLimit) -> str:
    return json.dumps({"lambda": lam, "tail": tail.to_dict(), "verdict": verdict.to_dict()}, indent=2)
