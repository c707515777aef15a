"""Fleming-Viot scaling regime.

With ``s = sigma/n``, ``r = rho/m`` and time sped up by ``n`` the empirical
measure converges, when ``n/m -> theta``, to a measure-valued diffusion
characterised by a martingale problem: for smooth ``f``

    N_t(f) = <f, nu_t> - <f, nu_0> - int_0^t [<A f, nu> + w theta rho Cov_nu(x, f)] dz

is a martingale with ``<N(f)>_t = 2 w theta int_0^t Var_nu(f) dz``, where
``A f = x(1-x)(f'' - sigma f')``.  This module builds the rescaled chain,
evaluates the prelimit and limit functionals and checks both relations on
simulated replicas.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from .chain import ChainParams, ChainState, drift_functional, qv_functional, run_ensemble
from .measures import GridMeasure, flatten
from .testfunctions import TestFunction

QFORM_TOL = 1e-12


@dataclass(frozen=True)
class FVParams:
    sigma: float = 0.0
    rho: float = 0.0
    theta: float = 1.0
    w: float = 1.0

    def __post_init__(self):
        if not (self.sigma >= 0 and self.rho >= 0):
            raise ValueError("sigma and rho must be nonnegative")
        if not (self.theta > 0 and self.w > 0):
            raise ValueError("theta and w must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def rescaled_chain(m: int, n: int, fv: FVParams) -> ChainParams:
    """Chain with ``s = sigma/n``, ``r = rho/m`` and time sped up by ``n``."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be positive")
    return ChainParams(m=m, n=n, s=fv.sigma / n, r=fv.rho / m, w=fv.w, time_factor=float(n))


def n_for_ratio(m: int, theta: float) -> int:
    """Smallest n with ``n/m >= theta``."""
    return max(1, int(math.ceil(theta * m - 1e-12)))


def operator_A(f: TestFunction, sigma: float) -> TestFunction:
    """``x(1-x)(f'' - sigma f')``."""
    return TestFunction(lambda x: x * (1.0 - x) * (f.d2(x) - sigma * f.d1(x)),
                        name=f"A[{f.name}]")


def _points(nu):
    """Support points and masses; densities enter through their quadrature nodes."""
    flat = flatten(nu)
    xs = [flat.pos]
    ws = [flat.w]
    for a, d in flat.dens:
        xs.append(d.nodes)
        ws.append(a * d.qweights * d.values)
    return np.concatenate(xs), np.concatenate(ws)


def limit_drift(nu, f: TestFunction, fv: FVParams) -> float:
    """``<A f, nu> + w theta rho (<x f, nu> - <f, nu><x, nu>)``."""
    x, w = _points(nu)
    fx = f(x)
    af = x * (1.0 - x) * (f.d2(x) - fv.sigma * f.d1(x))
    cov = np.dot(w, x * fx) - np.dot(w, fx) * np.dot(w, x)
    return float(np.dot(w, af) + fv.w * fv.theta * fv.rho * cov)


def limit_qv_forms(nu, f: TestFunction, fv: FVParams):
    """Both forms of the limit QV rate: ``2 w theta Var_nu(f)`` and
    ``w theta sum_ij nu_i nu_j (f_i - f_j)^2``."""
    x, w = _points(nu)
    fx = f(x)
    m1 = np.dot(w, fx)
    q = 2.0 * (np.dot(w, fx * fx) - m1 * m1)
    d2 = (fx[:, None] - fx[None, :]) ** 2
    pair = float(w @ d2 @ w)
    k = fv.w * fv.theta
    return k * q, k * pair


def limit_qv_rate(nu, f: TestFunction, fv: FVParams) -> float:
    a, b = limit_qv_forms(nu, f, fv)
    if abs(a - b) > QFORM_TOL * max(1.0, abs(a), abs(b)):
        raise ArithmeticError(f"Q-form identity violated: {a!r} vs {b!r}")
    return max(b, 0.0)


def _centered_cov(mu: np.ndarray, x: np.ndarray, fv: np.ndarray) -> float:
    """``Cov_mu(x, f)`` in centred form; exactly 0 for constant ``f``."""
    z = np.dot(mu, np.ones_like(fv))
    xb = np.dot(mu, x) / z
    fb = np.dot(mu, fv) / z
    return float(np.dot(mu, (x - xb) * (fv - fb)) / z)


def _sigma_rho(params: ChainParams):
    return params.s * params.n, params.r * params.m


def rescaled_drift(state: ChainState, params: ChainParams, f: TestFunction) -> float:
    """Prelimit drift in rescaled time:
    ``sum mu x(1-x)[D_xx f - sigma D^- f] + w rho (n/m) Cov_mu(x, f)``."""
    sigma, rho = _sigma_rho(params)
    n, m = params.n, params.m
    mu = np.bincount(state.counts, minlength=n + 1) / m
    x = np.arange(n + 1) / n
    fv = np.asarray(f(x), dtype=float)
    dm = np.zeros(n + 1)
    dxx = np.zeros(n + 1)
    dm[1:] = n * (fv[1:] - fv[:-1])
    dxx[1:-1] = n * n * (fv[2:] - 2.0 * fv[1:-1] + fv[:-2])
    indiv = np.sum(mu * x * (1.0 - x) * (dxx - sigma * dm))
    return float(indiv + params.w * rho * (n / m) * _centered_cov(mu, x, fv))


def rescaled_qv(state: ChainState, params: ChainParams, f: TestFunction) -> float:
    """Prelimit QV rate in rescaled time:
    ``(1/m) sum mu x(1-x)[(D^+ f)^2 + (1+s)(D^- f)^2]
    + w (n/m) sum_ij mu_i mu_j (1 + r x_j)(f_i - f_j)^2``."""
    n, m = params.n, params.m
    mu = np.bincount(state.counts, minlength=n + 1) / m
    x = np.arange(n + 1) / n
    fv = np.asarray(f(x), dtype=float)
    dp = np.zeros(n + 1)
    dm = np.zeros(n + 1)
    dp[:-1] = n * (fv[1:] - fv[:-1])
    dm[1:] = dp[:-1]
    indiv = np.sum(mu * x * (1.0 - x) * (dp ** 2 + (1.0 + params.s) * dm ** 2)) / m
    d2 = (fv[:, None] - fv[None, :]) ** 2
    group = params.w * (n / m) * float(mu @ d2 @ (mu * (1.0 + params.r * x)))
    return float(indiv + group)


def scaled_chain_functionals(state: ChainState, params: ChainParams, f: TestFunction):
    """Chain-time drift and QV multiplied by ``time_factor`` (cross-check helper)."""
    return (params.time_factor * drift_functional(state, params, f),
            params.time_factor * qv_functional(state, params, f))


# ---------------------------------------------------------------------------
# martingale study
# ---------------------------------------------------------------------------


@dataclass
class FVStudy:
    m: int
    n: int
    fv: FVParams
    f: str
    T: float
    replicas: int
    seed: int
    mean: float
    se: float
    var: float
    qv_mean: float
    limit_qv_mean: float
    mean_ok: bool
    var_ok: bool
    limit_var_ok: bool
    samples: np.ndarray
    var_tol: float = 0.2
    se_mult: float = 3.0

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.var_ok and self.limit_var_ok

    def to_dict(self, include_samples: bool = False) -> dict:
        d = {"params": {"m": self.m, "n": self.n, **self.fv.to_dict(), "f": self.f, "T": self.T,
                        "seed": self.seed},
             "replicas": self.replicas, "mean": self.mean, "se": self.se, "var": self.var,
             "qv_mean": self.qv_mean, "limit_qv_mean": self.limit_qv_mean,
             "pass": {"mean": self.mean_ok, "var": self.var_ok, "limit_var": self.limit_var_ok}}
        if include_samples:
            d["samples"] = self.samples.tolist()
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=2)


def _within(value: float, target: float, rel: float) -> bool:
    if target == 0.0:
        return value == 0.0
    return abs(value - target) <= rel * abs(target)


def _seed_from(rng: Union[int, np.random.Generator]) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2 ** 63))
    return int(rng)


def fv_martingale_study(nu0: GridMeasure, m: int, n: int, fv: FVParams, f: TestFunction, T: float,
                        replicas: int, rng: Union[int, np.random.Generator], *,
                        min_replicas: int = 100, var_tol: float = 0.2, se_mult: float = 3.0,
                        workers: int = 1, key=()) -> FVStudy:
    """Simulate the rescaled chain and test the martingale relations for ``f``.

    Per replica ``N_T = <f, nu_T> - <f, nu_0> - int_0^T rescaled drift``.  The
    sample variance of ``N_T`` is compared with the mean integrated prelimit
    QV and with the mean of ``2 w theta int_0^T Var_nu(f)``.
    """
    if replicas < min_replicas:
        raise ValueError(f"need at least {min_replicas} replicas for a standard error, got {replicas}")
    if T < 0:
        raise ValueError("T must be nonnegative")
    params = rescaled_chain(m, n, fv)
    seed = _seed_from(rng)
    ens = run_ensemble(nu0, params, T, [f], [T], replicas, seed, workers=workers, key=key)
    N = ens.residuals()[:, 0, -1]
    qv = ens.qv_integral[:, 0, -1]
    lqv = 2.0 * fv.w * fv.theta * ens.var_integral[:, 0, -1]
    mean = float(N.mean())
    var = float(N.var(ddof=1))
    se = math.sqrt(var / replicas)
    mean_ok = abs(mean) <= se_mult * se if se > 0 else mean == 0.0
    return FVStudy(m=m, n=n, fv=fv, f=f.name, T=float(T), replicas=replicas, seed=seed,
                   mean=mean, se=se, var=var, qv_mean=float(qv.mean()),
                   limit_qv_mean=float(lqv.mean()), mean_ok=bool(mean_ok),
                   var_ok=_within(var, float(qv.mean()), var_tol),
                   limit_var_ok=_within(var, float(lqv.mean()), var_tol),
                   samples=N, var_tol=var_tol, se_mult=se_mult)
