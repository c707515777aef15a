"""Probability measures on [0, 1] and the functionals shared by the package.

Four concrete measure types are provided:

* :class:`GridMeasure`  -- weights on the lattice ``{0, 1/n, ..., 1}``.
* :class:`AtomicMeasure` -- finitely many weighted atoms.
* :class:`GridDensity` -- an absolutely continuous law, tabulated on a
  composite Gauss-Legendre grid graded towards both ends of its support.
* :class:`Beta` and :class:`Mixture` -- a Beta(lambda - alpha, alpha) law and a
  convex combination of other measures.

Every measure can be *flattened* into a set of atoms plus weighted densities;
``integrate``, ``tail_mass`` and ``wasserstein1`` work on that flat view.
Points near 1 are carried together with their complement ``1 - x`` so that
densities with a singularity at the right endpoint keep full precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import betainc, betaln

from .testfunctions import TestFunction

MASS_TOL = 1e-12
DENSITY_MASS_TOL = 1e-8
ATOM_MERGE_TOL = 1e-12
RESOLUTION_TOL = 1e-6

GL_ORDER = 16
GL_CHECK_ORDER = 10
N_UNIFORM_PANELS = 16
GRADING_RATIO = 0.25
GRADING_DEPTH = 1e-40


class MeasureError(ValueError):
    """Invalid measure construction or argument."""


class EvaluationError(ValueError):
    """A test function produced a non-finite value."""


class ResolutionError(ArithmeticError):
    """A quadrature grid cannot resolve a density to the required accuracy."""


# --------------------------------------------------------------------------
# small value types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BetaSpec:
    """Parameters of the Beta(lam - alpha, alpha) fixed point."""

    lam: float
    alpha: float

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise MeasureError(f"lambda must be positive, got {self.lam}")
        if not (0 < self.alpha < self.lam):
            raise MeasureError(f"alpha must lie in (0, lambda), got alpha={self.alpha}, lambda={self.lam}")

    @property
    def a(self) -> float:
        return self.lam - self.alpha

    @property
    def b(self) -> float:
        return self.alpha

    @property
    def mean(self) -> float:
        return (self.lam - self.alpha) / self.lam

    def tail_constant(self) -> float:
        # mu([1-x, 1]) ~ x**alpha / (alpha * B(a, b)) as x -> 0
        return math.exp(-betaln(self.a, self.b)) / self.alpha


MASS_AT_ONE = "MassAtOne"
VANISHING_NEAR_ONE = "VanishingNearOne"
POWER_TAIL = "PowerTail"


@dataclass(frozen=True)
class TailDescriptor:
    """Behaviour of ``mu([1-x, 1])`` as ``x -> 0``."""

    kind: str
    alpha: Optional[float] = None
    C: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (MASS_AT_ONE, VANISHING_NEAR_ONE, POWER_TAIL):
            raise MeasureError(f"unknown tail kind {self.kind!r}")
        if self.kind == POWER_TAIL:
            if self.alpha is None or self.C is None or not (self.alpha > 0 and self.C > 0):
                raise MeasureError("PowerTail requires alpha > 0 and C > 0")

    def to_dict(self) -> dict:
        d: Dict[str, Any] = {"kind": self.kind}
        if self.kind == POWER_TAIL:
            d.update(alpha=self.alpha, C=self.C)
        return d


# --------------------------------------------------------------------------
# quadrature grids
# --------------------------------------------------------------------------

_gl_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    if order not in _gl_cache:
        _gl_cache[order] = np.polynomial.legendre.leggauss(order)
    return _gl_cache[order]



def logsumexp(v) -> float:
    """``log(sum(exp(v)))`` for a flat array; scipy's version is slow on the hot path."""
    v = np.asarray(v, dtype=float).ravel()
    top = v.max() if v.size else -np.inf
    if not np.isfinite(top):
        return float(top) if top == np.inf or np.isnan(top) else -np.inf
    return float(top + np.log(np.exp(v - top).sum()))

def graded_edges(n_uniform: int = N_UNIFORM_PANELS, ratio: float = GRADING_RATIO,
                 depth: float = GRADING_DEPTH) -> Tuple[np.ndarray, np.ndarray]:
    """Panel edges on [0, 1] as ``(u, 1 - u)`` pairs.

    Uniform panels in the interior; the two end panels are split
    geometrically down to ``depth`` so that power singularities at either
    endpoint are integrated to near machine precision.
    """
    if n_uniform < 4:
        raise ValueError("need at least four uniform panels")
    h0 = 1.0 / n_uniform
    geo = [h0]
    while geo[-1] * ratio > depth:
        geo.append(geo[-1] * ratio)
    small = np.array([0.0] + geo[::-1])  # 0 < ... < h0
    k = np.arange(2, n_uniform - 1)
    u = np.concatenate([small, k / n_uniform, 1.0 - small[::-1]])
    uc = np.concatenate([1.0 - small, (n_uniform - k) / n_uniform, small[::-1]])
    return u, uc


_EDGES = graded_edges()


def _complement_length(a, ac, b, bc):
    """Accurate ``b - a`` using complements when both points are near 1."""
    return np.where(np.asarray(a) >= 0.5, np.asarray(ac) - np.asarray(bc), np.asarray(b) - np.asarray(a))


# --------------------------------------------------------------------------
# measure types
# --------------------------------------------------------------------------

LogPdf = Callable[[np.ndarray, np.ndarray], np.ndarray]



@lru_cache(maxsize=64)
def _support_grid(lo, hi, lo_c, hi_c, order):
    """Graded panel edges on a support and the Gauss-Legendre nodes inside them (read-only)."""
    u, uc = _EDGES
    length = float(_complement_length(lo, lo_c, hi, hi_c))
    edges = lo + length * u
    edges_c = hi_c + length * uc
    edges[-1], edges_c[-1] = hi, hi_c
    edges[0], edges_c[0] = lo, lo_c
    xi, wi = gauss_legendre(order)
    a, ac, b, bc = edges[:-1], edges_c[:-1], edges[1:], edges_c[1:]
    h = _complement_length(a, ac, b, bc)
    x = (a[:, None] + h[:, None] * (1.0 + xi) / 2.0).ravel()
    xc = (bc[:, None] + h[:, None] * (1.0 - xi) / 2.0).ravel()
    q = (h[:, None] * wi / 2.0).ravel()
    out = (edges, edges_c, x, xc, q)
    for arr in out:
        arr.setflags(write=False)
    return out

class GridDensity:
    """Density on ``[lo, hi]`` tabulated on a graded Gauss-Legendre grid.

    ``logpdf(x, xc)`` is an *unnormalised* log-density evaluated at points
    ``x`` with accurate complements ``xc = 1 - x``; it may return ``-inf``.
    The constructor normalises it by quadrature and stores nodes, weights and
    normalised values.  ``origin`` is a JSON-able recipe that rebuilds the
    same density exactly (used by serialisation), ``tail`` optional
    right-endpoint metadata, ``cdf(x, xc)`` an optional closed-form distribution function.
    """

    rule = "gauss-legendre-graded"

    def __init__(self, logpdf: LogPdf, support: Tuple[float, float] = (0.0, 1.0),
                 support_c: Optional[Tuple[float, float]] = None, *,
                 tail: Optional[TailDescriptor] = None, origin: Optional[dict] = None,
                 label: str = "density", check: bool = True, cdf: Optional[LogPdf] = None):
        lo, hi = float(support[0]), float(support[1])
        if support_c is None:
            support_c = (1.0 - lo, 1.0 - hi)
        lo_c, hi_c = float(support_c[0]), float(support_c[1])
        if not (0.0 <= lo < hi <= 1.0):
            raise MeasureError(f"invalid density support [{lo}, {hi}]")
        self.lo, self.hi, self.lo_c, self.hi_c = lo, hi, lo_c, hi_c
        self.length = float(_complement_length(lo, lo_c, hi, hi_c))
        if not self.length > 0:
            raise MeasureError("density support has zero length")
        self._logpdf = logpdf
        self.tail = tail
        self.origin = origin
        self.label = label
        self._cdf = cdf

        self.edges, self.edges_c, self.nodes, self.nodes_c, self.qweights = \
            _support_grid(lo, hi, lo_c, hi_c, GL_ORDER)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            logv = np.asarray(logpdf(self.nodes, self.nodes_c), dtype=float)
        if np.any(np.isnan(logv)) or np.any(logv == np.inf):
            raise ResolutionError(f"{label}: log-density not finite on the quadrature grid")
        with np.errstate(divide="ignore"):
            logq = np.log(self.qweights)
        self.log_norm = float(logsumexp(logv + logq))
        if not math.isfinite(self.log_norm):
            raise ResolutionError(f"{label}: density has no mass on its quadrature grid")
        self.values = np.exp(logv - self.log_norm)
        panel_mass = (self.values * self.qweights).reshape(-1, GL_ORDER).sum(axis=1)
        self.cum_edges = np.concatenate([[0.0], np.cumsum(panel_mass)])

        if check:
            n2, n2c, q2 = _support_grid(lo, hi, lo_c, hi_c, GL_CHECK_ORDER)[2:]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                lv2 = np.asarray(logpdf(n2, n2c), dtype=float)
                z2 = float(logsumexp(lv2 + np.log(q2)))
            if not math.isfinite(z2) or abs(math.expm1(z2 - self.log_norm)) > RESOLUTION_TOL:
                raise ResolutionError(
                    f"{label}: quadrature does not resolve the density "
                    f"(relative mass disagreement {abs(math.expm1(z2 - self.log_norm)):.2e})")
        for arr in (self.values, self.cum_edges):
            arr.setflags(write=False)

    def logpdf(self, x, xc=None) -> np.ndarray:
        """Normalised log-density; ``-inf`` outside the support."""
        x = np.asarray(x, dtype=float)
        xc = 1.0 - x if xc is None else np.asarray(xc, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        out = np.full(x.shape, -np.inf)
        if np.any(inside):
            with np.errstate(divide="ignore", invalid="ignore"):
                out[inside] = self._logpdf(x[inside], xc[inside]) - self.log_norm
        return out

    def pdf(self, x, xc=None) -> np.ndarray:
        return np.exp(self.logpdf(x, xc))

    @property
    def raw_logpdf(self) -> LogPdf:
        return self._logpdf

    def cdf(self, x, xc=None) -> np.ndarray:
        """Distribution function at ``x``: the closed form if one was given, else partial-panel quadrature."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xc = 1.0 - x if xc is None else np.atleast_1d(np.asarray(xc, dtype=float))
        out = np.zeros(x.shape)
        out[x >= self.hi] = 1.0
        inside = (x > self.lo) & (x < self.hi)
        if not np.any(inside):
            return out
        xi_, xci = x[inside], xc[inside]
        if self._cdf is not None:
            out[inside] = np.clip(self._cdf(xi_, xci), 0.0, 1.0)
            return out
        idx = np.clip(np.searchsorted(self.edges, xi_, side="right") - 1, 0, len(self.edges) - 2)
        a, ac = self.edges[idx], self.edges_c[idx]
        delta = np.maximum(_complement_length(a, ac, xi_, xci), 0.0)
        g, wg = gauss_legendre(GL_ORDER)
        y = a[:, None] + delta[:, None] * (1.0 + g) / 2.0
        yc = xci[:, None] + delta[:, None] * (1.0 - g) / 2.0
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            v = np.exp(np.asarray(self._logpdf(y, yc), dtype=float) - self.log_norm)
        v = np.where(np.isfinite(v), v, 0.0)
        partial = (v * wg).sum(axis=1) * delta / 2.0
        out[inside] = np.minimum(self.cum_edges[idx] + partial, 1.0)
        return out

    def __repr__(self):
        return f"GridDensity({self.label}, support=[{self.lo:.6g}, {self.hi:.6g}])"


class AtomicMeasure:
    """Finitely many atoms ``sum_i a_i delta_{x_i}`` with ``sum a_i = 1``.

    Atoms closer than ``ATOM_MERGE_TOL`` are merged.  ``complements`` may
    supply accurate values of ``1 - x_i``.
    """

    def __init__(self, positions: Sequence[float], weights: Sequence[float],
                 complements: Optional[Sequence[float]] = None, *, normalize: bool = False):
        pos = np.atleast_1d(np.asarray(positions, dtype=float))
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        posc = 1.0 - pos if complements is None else np.atleast_1d(np.asarray(complements, dtype=float))
        if pos.shape != w.shape or pos.shape != posc.shape or pos.size == 0:
            raise MeasureError("positions and weights must be nonempty and of equal length")
        if np.any(~np.isfinite(pos)) or np.any(pos < 0) or np.any(pos > 1):
            raise MeasureError("atom positions must lie in [0, 1]")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise MeasureError("atom weights must be nonnegative")
        keep = w > 0
        pos, w, posc = pos[keep], w[keep], posc[keep]
        if pos.size == 0:
            raise MeasureError("atomic measure has no mass")
        total = w.sum()
        if normalize:
            w = w / total
        elif abs(total - 1.0) > MASS_TOL:
            raise MeasureError(f"atom weights sum to {total!r}, not 1")
        order = np.argsort(pos, kind="stable")
        pos, w, posc = pos[order], w[order], posc[order]
        # merge near-coincident atoms
        mp, mw, mc = [pos[0]], [w[0]], [posc[0]]
        for p, a, c in zip(pos[1:], w[1:], posc[1:]):
            if p - mp[-1] < ATOM_MERGE_TOL and abs(c - mc[-1]) < ATOM_MERGE_TOL:
                mw[-1] += a
            else:
                mp.append(p), mw.append(a), mc.append(c)
        self.positions = np.array(mp)
        self.weights = np.array(mw)
        self.complements = np.array(mc)
        for arr in (self.positions, self.weights, self.complements):
            arr.setflags(write=False)

    def __repr__(self):
        atoms = ", ".join(f"{a:.4g}@{x:.4g}" for x, a in zip(self.positions, self.weights))
        return f"AtomicMeasure({atoms})"


class GridMeasure:
    """Probability vector on ``E_n = {0, 1/n, ..., 1}``; entry k is the mass at k/n."""

    def __init__(self, weights: Sequence[float], *, normalize: bool = True):
        w = np.asarray(weights, dtype=float).ravel()
        if w.size < 2:
            raise MeasureError("a grid measure needs n >= 1 (at least two sites)")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise MeasureError("grid weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise MeasureError("grid measure has no mass")
        if normalize:
            w = w / total
        elif abs(total - 1.0) > MASS_TOL:
            raise MeasureError(f"grid weights sum to {total!r}, not 1")
        self.weights = w
        self.weights.setflags(write=False)

    @property
    def n(self) -> int:
        return self.weights.size - 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.n + 1) / self.n

    @classmethod
    def point_mass(cls, n: int, k: int) -> "GridMeasure":
        w = np.zeros(n + 1)
        w[k] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, n: int) -> "GridMeasure":
        return cls(np.ones(n + 1))

    def __repr__(self):
        return f"GridMeasure(n={self.n})"


class Beta:
    """The Beta(lam - alpha, alpha) law as a measure."""

    def __init__(self, spec: Union[BetaSpec, float], alpha: Optional[float] = None):
        self.spec = spec if isinstance(spec, BetaSpec) else BetaSpec(float(spec), float(alpha))

    @cached_property
    def density(self) -> GridDensity:
        return beta_density(self.spec.a, self.spec.b)

    def __repr__(self):
        return f"Beta(lambda={self.spec.lam:g}, alpha={self.spec.alpha:g})"


class Mixture:
    """Convex combination of measures; components keep their own unit mass."""

    def __init__(self, components: Sequence[Tuple[float, Any]], *, normalize: bool = False):
        if not components:
            raise MeasureError("mixture needs at least one component")
        w = np.array([float(c[0]) for c in components])
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise MeasureError("mixture weights must be nonnegative")
        if normalize:
            w = w / w.sum()
        elif abs(w.sum() - 1.0) > DENSITY_MASS_TOL:
            raise MeasureError(f"mixture weights sum to {w.sum()!r}, not 1")
        self.components = [(float(wi), c[1]) for wi, c in zip(w, components) if wi > 0]
        if not self.components:
            raise MeasureError("mixture has no mass")

    def __repr__(self):
        return "Mixture(" + ", ".join(f"{w:.4g}*{m!r}" for w, m in self.components) + ")"


LimitMeasure = Union[AtomicMeasure, GridDensity, Beta, Mixture]
AnyMeasure = Union[GridMeasure, AtomicMeasure, GridDensity, Beta, Mixture]


# --------------------------------------------------------------------------
# constructors for common densities
# --------------------------------------------------------------------------


def delta(x: float, xc: Optional[float] = None) -> AtomicMeasure:
    return AtomicMeasure([x], [1.0], None if xc is None else [xc])


def beta_density(a: float, b: float) -> GridDensity:
    """Beta(a, b) density; its tail exponent at 1 is ``b``."""
    lognorm = float(betaln(a, b))

    def logpdf(x, xc):
        with np.errstate(divide="ignore"):
            return (a - 1.0) * np.log(x) + (b - 1.0) * np.log(xc) - lognorm

    def cdf(x, xc):
        # the lower tail from whichever end keeps precision
        return np.where(x <= 0.5, betainc(a, b, x), 1.0 - betainc(b, a, xc))

    tail = TailDescriptor(POWER_TAIL, b, math.exp(-lognorm) / b)
    return GridDensity(logpdf, tail=tail, origin={"family": "beta", "a": a, "b": b},
                       label=f"Beta({a:g},{b:g})", cdf=cdf)


def uniform() -> GridDensity:
    return GridDensity(lambda x, xc: np.zeros_like(x), tail=TailDescriptor(POWER_TAIL, 1.0, 1.0),
                       origin={"family": "uniform"}, label="uniform")


def linear_decreasing() -> GridDensity:
    """Density ``2(1 - x)``; ``mu([1-x, 1]) = x**2``."""
    def logpdf(x, xc):
        with np.errstate(divide="ignore"):
            return np.log(2.0 * xc)

    return GridDensity(logpdf, tail=TailDescriptor(POWER_TAIL, 2.0, 1.0),
                       origin={"family": "linear_decreasing"}, label="2(1-x)")


def truncated_uniform(c: float) -> GridDensity:
    """Uniform density on ``[0, c]`` with ``c < 1``."""
    if not (0 < c < 1):
        raise MeasureError(f"truncation point must lie in (0, 1), got {c}")
    return GridDensity(lambda x, xc: np.full_like(x, -math.log(c)), support=(0.0, c),
                       tail=TailDescriptor(VANISHING_NEAR_ONE),
                       origin={"family": "truncated_uniform", "c": c}, label=f"U[0,{c:g}]")


# --------------------------------------------------------------------------
# flattening
# --------------------------------------------------------------------------


@dataclass
class Flat:
    """Atoms (position, complement, weight) plus weighted densities."""

    pos: np.ndarray
    posc: np.ndarray
    w: np.ndarray
    dens: List[Tuple[float, GridDensity]]

    @property
    def total_mass(self) -> float:
        return float(self.w.sum() + sum(a for a, _ in self.dens))


def flatten(mu: AnyMeasure) -> Flat:
    if isinstance(mu, GridMeasure):
        k = np.nonzero(mu.weights)[0]
        return Flat(k / mu.n, (mu.n - k) / mu.n, mu.weights[k].copy(), [])
    if isinstance(mu, AtomicMeasure):
        return Flat(mu.positions.copy(), mu.complements.copy(), mu.weights.copy(), [])
    if isinstance(mu, GridDensity):
        return Flat(np.empty(0), np.empty(0), np.empty(0), [(1.0, mu)])
    if isinstance(mu, Beta):
        return Flat(np.empty(0), np.empty(0), np.empty(0), [(1.0, mu.density)])
    if isinstance(mu, Mixture):
        parts = [(w, flatten(m)) for w, m in mu.components]
        return Flat(np.concatenate([p.pos for _, p in parts]),
                    np.concatenate([p.posc for _, p in parts]),
                    np.concatenate([w * p.w for w, p in parts]),
                    [(w * a, d) for w, p in parts for a, d in p.dens])
    raise TypeError(f"not a measure: {type(mu).__name__}")


# --------------------------------------------------------------------------
# functionals
# --------------------------------------------------------------------------


def _evaluate(f, x: np.ndarray) -> np.ndarray:
    v = np.asarray(f(x), dtype=float)
    v = np.broadcast_to(v, x.shape)
    if not np.all(np.isfinite(v)):
        bad = x[~np.isfinite(v)][:3]
        raise EvaluationError(f"test function is not finite at {bad.tolist()}")
    return v


def integrate(mu: AnyMeasure, f: Union[TestFunction, Callable]) -> float:
    """``<f, mu>``: atoms contribute ``a_i f(x_i)``, densities by quadrature."""
    flat = flatten(mu)
    total = 0.0
    if flat.w.size:
        total += float(np.dot(flat.w, _evaluate(f, flat.pos)))
    for a, d in flat.dens:
        total += a * float(np.dot(d.qweights * d.values, _evaluate(f, d.nodes)))
    return total


def total_mass(mu: AnyMeasure) -> float:
    return flatten(mu).total_mass


def mean(mu: AnyMeasure) -> float:
    return integrate(mu, lambda x: x)


def tail_mass(mu: AnyMeasure, x: float) -> float:
    """``mu([1 - x, 1])`` with the closed-interval convention."""
    if not (0.0 <= x <= 1.0):
        raise MeasureError(f"tail_mass needs x in [0, 1], got {x}")
    flat = flatten(mu)
    total = float(flat.w[flat.posc <= x + 1e-15].sum())
    for a, d in flat.dens:
        total += a * (1.0 - float(d.cdf(np.array([1.0 - x]), np.array([x]))[0]))
    return min(max(total, 0.0), 1.0)


def _grid_points(flats: Sequence[Flat]) -> Tuple[np.ndarray, np.ndarray]:
    xs = [np.array([0.0, 1.0])]
    xcs = [np.array([1.0, 0.0])]
    for fl in flats:
        xs.append(fl.pos)
        xcs.append(fl.posc)
        for _, d in fl.dens:
            xs += [d.edges, d.nodes]
            xcs += [d.edges_c, d.nodes_c]
    x = np.concatenate(xs)
    xc = np.concatenate(xcs)
    order = np.lexsort((-xc, x))
    x, xc = x[order], xc[order]
    keep = np.concatenate([[True], (np.diff(x) != 0) | (np.diff(xc) != 0)])
    return x[keep], xc[keep]


def cdf_on(flat: Flat, x: np.ndarray, xc: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous and atomic parts of the CDF at ``x`` (right-continuous)."""
    cont = np.zeros(x.shape)
    for a, d in flat.dens:
        cont += a * d.cdf(x, xc)
    if flat.w.size:
        order = np.argsort(flat.pos, kind="stable")
        cw = np.concatenate([[0.0], np.cumsum(flat.w[order])])
        atom = cw[np.searchsorted(flat.pos[order], x, side="right")]
    else:
        atom = np.zeros(x.shape)
    return cont, atom


def _abs_linear_integral(dl: np.ndarray, dr: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Exact integral of ``|linear|`` over cells with end values dl, dr."""
    same = dl * dr >= 0
    out = np.empty_like(h)
    out[same] = 0.5 * h[same] * (np.abs(dl[same]) + np.abs(dr[same]))
    ds = ~same
    denom = np.abs(dl[ds]) + np.abs(dr[ds])
    out[ds] = 0.5 * h[ds] * (dl[ds] ** 2 + dr[ds] ** 2) / denom
    return out


W1_GL_ORDER = 4
W1_BISECTIONS = 60
W1_NOISE = 1e-13  # gaps below this are round-off; cells are not split for them


def _cell_points(a, ac, t):
    """Points ``a + t`` with complements, measured from whichever end is accurate."""
    near_one = (a >= 0.5)[:, None]
    yc = np.where(near_one, ac[:, None] - t, 1.0 - (a[:, None] + t))
    y = np.where(near_one, 1.0 - yc, a[:, None] + t)
    return y, yc


def _cont_gap(fm: Flat, fn: Flat, y: np.ndarray, yc: np.ndarray) -> np.ndarray:
    shape = y.shape
    y, yc = y.ravel(), yc.ravel()
    return (cdf_on(fm, y, yc)[0] - cdf_on(fn, y, yc)[0]).reshape(shape)


def wasserstein1(mu: AnyMeasure, nu: AnyMeasure) -> float:
    """``W1 = int_0^1 |F_mu - F_nu| dx`` on the common refinement of breakpoints.

    Exact for atomic measures.  With densities present each cell is
    integrated by Gauss-Legendre; a cell where the CDF gap changes sign is
    split at the zero (found by bisection) first.
    """
    fm, fn = flatten(mu), flatten(nu)
    x, xc = _grid_points([fm, fn])
    h = np.maximum(_complement_length(x[:-1], xc[:-1], x[1:], xc[1:]), 0.0)
    cm, am = cdf_on(fm, x, xc)
    cn, an = cdf_on(fn, x, xc)
    da = (am - an)[:-1]  # the atomic part is constant on each open cell
    dl = (cm - cn)[:-1] + da
    dr = (cm - cn)[1:] + da
    if not (fm.dens or fn.dens):
        return float(np.sum(np.abs(dl) * h))
    a, ac = x[:-1], xc[:-1]
    g, wg = gauss_legendre(W1_GL_ORDER)
    t = h[:, None] * (1.0 + g) / 2.0
    vals = _cont_gap(fm, fn, *_cell_points(a, ac, t)) + da[:, None]
    out = np.abs((vals * wg).sum(axis=1)) * h / 2.0
    allv = np.column_stack([dl, vals, dr])
    mixed = (allv.max(axis=1) > W1_NOISE) & (allv.min(axis=1) < -W1_NOISE)
    if np.any(mixed):
        out[mixed] = _split_cells(fm, fn, a[mixed], ac[mixed], h[mixed], da[mixed],
                                  dl[mixed], dr[mixed], g, wg)
    return float(out.sum())


def _split_cells(fm, fn, a, ac, h, da, dl, dr, g, wg):
    """``int |gap|`` over cells whose gap changes sign."""
    single = dl * dr < 0
    lo, hi = np.zeros_like(h), h.copy()
    for _ in range(W1_BISECTIONS):
        mid = 0.5 * (lo + hi)
        v = _cont_gap(fm, fn, *_cell_points(a, ac, mid[:, None]))[:, 0] + da
        left = np.sign(v) == np.sign(dl)
        lo = np.where(left, mid, lo)
        hi = np.where(left, hi, mid)
    root = np.where(single, 0.5 * (lo + hi), h)
    out = np.zeros_like(h)
    for start, length in ((np.zeros_like(h), root), (root, h - root)):
        t = start[:, None] + length[:, None] * (1.0 + g) / 2.0
        v = _cont_gap(fm, fn, *_cell_points(a, ac, t)) + da[:, None]
        out += np.abs((v * wg).sum(axis=1)) * length / 2.0
    # more than one zero: fall back to a fine piecewise-linear rule
    multi = ~single
    if np.any(multi):
        k = 64
        t = h[multi, None] * np.linspace(0.0, 1.0, k + 1)[None, :]
        v = _cont_gap(fm, fn, *_cell_points(a[multi], ac[multi], t)) + da[multi, None]
        step = np.repeat(h[multi, None] / k, k, axis=1)
        out[multi] = _abs_linear_integral(v[:, :-1].ravel(), v[:, 1:].ravel(),
                                          step.ravel()).reshape(-1, k).sum(axis=1)
    return out


def sample(mu: GridMeasure, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. lattice sites drawn by inverse CDF from ``count`` uniforms."""
    if not isinstance(mu, GridMeasure):
        raise TypeError("sample() needs a GridMeasure")
    cdf = np.cumsum(mu.weights)
    cdf[-1] = 1.0
    u = rng.random(int(count))
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, mu.n).astype(np.int64)


def discretized_beta(n: int, spec: BetaSpec) -> GridMeasure:
    """Weights proportional to ``(k/n)**(lam-alpha-1) (1-k/n)**(alpha-1)`` on 0 < k < n."""
    if n < 2:
        raise MeasureError("discretized_beta needs n >= 2")
    k = np.arange(1, n)
    with np.errstate(all="ignore"):
        logw = (spec.a - 1.0) * np.log(k / n) + (spec.b - 1.0) * np.log((n - k) / n)
    if not np.all(np.isfinite(logw)):
        raise MeasureError("discretized Beta weights overflow")
    w = np.exp(logw - logw.max())
    if not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise MeasureError("discretized Beta weights overflow")
    full = np.zeros(n + 1)
    full[1:n] = w
    return GridMeasure(full)


def discretize(mu: AnyMeasure, n: int) -> GridMeasure:
    """Project a measure onto ``E_n``.

    Atoms move to the nearest site; each density component is replaced by
    weights proportional to its pdf at the interior sites ``0 < k < n``
    (the same rule that defines :func:`discretized_beta`).
    """
    if isinstance(mu, GridMeasure):
        if mu.n != n:
            raise MeasureError(f"grid measure lives on n={mu.n}, not n={n}")
        return mu
    if isinstance(mu, Beta):
        return discretized_beta(n, mu.spec)
    if isinstance(mu, Mixture):
        w = np.zeros(n + 1)
        for a, comp in mu.components:
            w += a * discretize(comp, n).weights
        return GridMeasure(w)
    flat = flatten(mu)
    w = np.zeros(n + 1)
    if flat.w.size:
        k = np.where(flat.pos < 0.5, np.rint(flat.pos * n), n - np.rint(flat.posc * n)).astype(int)
        np.add.at(w, k, flat.w)
    for a, d in flat.dens:
        k = np.arange(1, n)
        dens = d.pdf(k / n, (n - k) / n)
        if dens.sum() > 0 and np.all(np.isfinite(dens)):
            w[1:n] += a * dens / dens.sum()
        else:
            m = integrate(d, lambda x: x)
            w[int(np.clip(round(m * n), 0, n))] += a
    return GridMeasure(w)


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

_ORIGIN_BUILDERS: Dict[str, Callable[[dict], GridDensity]] = {}


def register_origin(key: str, builder: Callable[[dict], GridDensity]) -> None:
    """Register how to rebuild densities whose ``origin`` dict contains ``key``."""
    _ORIGIN_BUILDERS[key] = builder


def _build_family(o: dict) -> GridDensity:
    fam = o["family"]
    if fam == "uniform":
        return uniform()
    if fam == "linear_decreasing":
        return linear_decreasing()
    if fam == "truncated_uniform":
        return truncated_uniform(o["c"])
    if fam == "beta":
        return beta_density(o["a"], o["b"])
    raise MeasureError(f"unknown density family {fam!r}")


register_origin("family", _build_family)


def density_from_origin(origin: dict) -> GridDensity:
    for key, builder in _ORIGIN_BUILDERS.items():
        if key in origin:
            return builder(origin)
    raise MeasureError(f"cannot rebuild density from origin {origin!r}")


def _tabulated_density(d: dict) -> GridDensity:
    """Density from tabulated values: Lagrange interpolation on each panel."""
    nodes = np.asarray(d["nodes"], dtype=float)
    values = np.asarray(d["values"], dtype=float)
    lo, hi = d["support"]
    lo_c, hi_c = d.get("support_c", (1.0 - lo, 1.0 - hi))
    n_pan = nodes.size // GL_ORDER
    pn = nodes.reshape(n_pan, GL_ORDER)
    pv = values.reshape(n_pan, GL_ORDER)
    xi, _ = gauss_legendre(GL_ORDER)
    # barycentric weights for Gauss-Legendre nodes
    bw = np.array([1.0 / np.prod(xi[j] - np.delete(xi, j)) for j in range(GL_ORDER)])
    length = float(_complement_length(lo, lo_c, hi, hi_c))
    u, _ = _EDGES
    edges = lo + length * u
    edges[-1] = hi

    def logpdf(x, xc):
        shape = np.shape(x)
        x = np.ravel(x)
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_pan - 1)
        a, b = edges[idx], edges[idx + 1]
        t = np.where(b > a, 2.0 * (x - a) / np.where(b > a, b - a, 1.0) - 1.0, 0.0)
        diff = t[:, None] - xi[None, :]
        exact = np.isclose(diff, 0.0, atol=1e-15)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = bw / diff
            val = (terms * pv[idx]).sum(axis=1) / terms.sum(axis=1)
        hit = exact.any(axis=1)
        val[hit] = pv[idx[hit]][exact[hit]]
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(val, 0.0)).reshape(shape)

    tail = TailDescriptor(**d["tail"]) if d.get("tail") else None
    return GridDensity(logpdf, (lo, hi), (lo_c, hi_c), tail=tail, label=d.get("label", "tabulated"),
                       check=False)


def to_dict(mu: AnyMeasure) -> dict:
    """JSON-able description: ``{"kind": "grid|atomic|density|beta|mixture", ...}``."""
    if isinstance(mu, GridMeasure):
        return {"kind": "grid", "n": mu.n, "weights": mu.weights.tolist()}
    if isinstance(mu, AtomicMeasure):
        return {"kind": "atomic", "positions": mu.positions.tolist(),
                "complements": mu.complements.tolist(), "weights": mu.weights.tolist()}
    if isinstance(mu, Beta):
        return {"kind": "beta", "lambda": mu.spec.lam, "alpha": mu.spec.alpha}
    if isinstance(mu, GridDensity):
        d = {"kind": "density", "label": mu.label, "rule": mu.rule,
             "support": [mu.lo, mu.hi], "support_c": [mu.lo_c, mu.hi_c],
             "nodes": mu.nodes.tolist(), "values": mu.values.tolist()}
        if mu.tail is not None:
            d["tail"] = mu.tail.to_dict()
        if mu.origin is not None:
            d["origin"] = mu.origin
        return d
    if isinstance(mu, Mixture):
        return {"kind": "mixture",
                "components": [{"weight": w, "measure": to_dict(m)} for w, m in mu.components]}
    raise TypeError(f"not a measure: {type(mu).__name__}")


def from_dict(d: dict) -> AnyMeasure:
    kind = d.get("kind")
    if kind == "grid":
        return GridMeasure(d["weights"], normalize=False)
    if kind == "atomic":
        return AtomicMeasure(d["positions"], d["weights"], d.get("complements"))
    if kind == "beta":
        return Beta(BetaSpec(d["lambda"], d["alpha"]))
    if kind == "density":
        if d.get("origin") is not None:
            return density_from_origin(d["origin"])
        return _tabulated_density(d)
    if kind == "mixture":
        return Mixture([(c["weight"], from_dict(c["measure"])) for c in d["components"]])
    raise MeasureError(f"unknown measure kind {kind!r}")


def dumps(mu: AnyMeasure, **kw) -> str:
    return json.dumps(to_dict(mu), **kw)


def loads(s: str) -> AnyMeasure:
    return from_dict(json.loads(s))
