"""Reproducible studies of the scaling limits at desk scale.

A study is described by a :class:`StudyConfig` (usually read from YAML) and
produces a :class:`StudyResult`: one CSV row per ladder rung (or horizon)
plus a JSON manifest with the configuration, seeds, timings and verdicts.
Verdicts are ``PASS``, ``FAIL`` or ``WARN``; only ``FAIL`` fails a study.

Example config::

    kind: det_convergence
    ladder: [[10, 10], [30, 30], [100, 100]]
    model: {s: 1.0, r: 3.0, w: 1.0}
    initial: uniform
    T: 1.0
    replicas: 50
    seed: 1
    options: {threshold: 0.05}
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from . import kernel
from .chain import ChainParams, ChainState, empirical_measure, run_ensemble
from .fleming_viot import FVParams, fv_martingale_study, limit_qv_forms, QFORM_TOL
from .initial import parse_measure
from .limit import classify_longtime, evolve, tail_of
from .measures import BetaSpec, GridMeasure, discretize, discretized_beta, wasserstein1
from .testfunctions import TestFunction, parse as parse_function

log = logging.getLogger(__name__)

KINDS = ("det_convergence", "qv_scaling", "fv_martingale", "steady_state", "quasi_invariance")
PASS, FAIL, WARN = "PASS", "FAIL", "WARN"


class ConfigError(ValueError):
    """Invalid study configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class StudyConfig:
    kind: str
    ladder: List[Tuple[int, int]] = field(default_factory=list)
    model: Dict[str, float] = field(default_factory=dict)
    initial: str = "uniform"
    T: float = 1.0
    replicas: int = 100
    seed: int = 0
    output: Optional[str] = None
    observables: List[str] = field(default_factory=lambda: ["x"])
    options: Dict[str, Any] = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("kind", f"must be one of {', '.join(KINDS)}, got {self.kind!r}")
        try:
            self.ladder = [(int(m), int(n)) for m, n in self.ladder]
        except (TypeError, ValueError):
            raise ConfigError("ladder", "must be a list of [m, n] pairs") from None
        if self.kind != "steady_state":
            if not self.ladder:
                raise ConfigError("ladder", "must be nonempty")
            if any(m < 1 or n < 1 for m, n in self.ladder):
                raise ConfigError("ladder", "m and n must be positive")
            if self.kind == "qv_scaling":
                ns = {n for _, n in self.ladder}
                ms = [m for m, _ in self.ladder]
                if len(ns) != 1 or any(b <= a for a, b in zip(ms, ms[1:])):
                    raise ConfigError("ladder", "qv_scaling needs fixed n and strictly increasing m")
            else:
                mins = [min(m, n) for m, n in self.ladder]
                if any(b <= a for a, b in zip(mins, mins[1:])):
                    raise ConfigError("ladder", "must be strictly increasing in min(m, n)")
        try:
            self.replicas = int(self.replicas)
            self.seed = int(self.seed)
            self.T = float(self.T)
            self.model = {k: float(v) for k, v in (self.model or {}).items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from None
        if self.replicas < 1:
            raise ConfigError("replicas", "must be at least 1")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if not (self.T >= 0 and math.isfinite(self.T)):
            raise ConfigError("T", "must be finite and nonnegative")
        if isinstance(self.observables, str):
            self.observables = [self.observables]
        self.options = dict(self.options or {})

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a mapping")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        if "kind" not in d:
            raise ConfigError("kind", "missing")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "StudyConfig":
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"malformed YAML: {exc}") from None
        return cls.from_dict(d or {})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ladder": [list(p) for p in self.ladder], "model": self.model,
                "initial": self.initial, "T": self.T, "replicas": self.replicas, "seed": self.seed,
                "output": self.output, "observables": list(self.observables),
                "options": self.options, "workers": self.workers}

    def option(self, key: str, default):
        return self.options.get(key, default)

    def model_value(self, key: str, default=None) -> float:
        if key not in self.model:
            if default is None:
                raise ConfigError(f"model.{key}", "missing")
            return default
        return self.model[key]


@dataclass
class StudyResult:
    kind: str
    config: StudyConfig
    columns: List[str]
    rows: List[Dict[str, Any]]
    verdicts: Dict[str, str]
    summary: Dict[str, Any] = field(default_factory=dict)
    timings: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v != FAIL for v in self.verdicts.values())

    def csv_text(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.columns)
        for row in self.rows:
            wr.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def manifest(self) -> dict:
        return {"kind": self.kind, "config": self.config.to_dict(), "verdicts": self.verdicts,
                "summary": self.summary, "wall_clock_s": self.timings,
                "kernel": kernel.IMPLEMENTATION, "rows": self.rows}

    def write(self, out_dir) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.kind}.csv"
        json_path = out / f"{self.kind}.json"
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.manifest(), indent=2, default=_jsonable))
        return csv_path, json_path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _se(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def variance_se(x: np.ndarray) -> float:
    """Standard error of the sample variance (fourth-moment formula)."""
    x = np.asarray(x, dtype=float)
    k = x.size
    if k < 4:
        return float("nan")
    c = x - x.mean()
    m2 = np.mean(c ** 2)
    m4 = np.mean(c ** 4)
    return float(math.sqrt(max(m4 - m2 * m2 * (k - 3) / (k - 1), 0.0) / k))


def _nonincreasing(means, ses) -> bool:
    return all(b <= a + math.hypot(sa, sb) for a, b, sa, sb in zip(means, means[1:], ses, ses[1:]))


def _nondecreasing(means, ses) -> bool:
    return all(b >= a - math.hypot(sa, sb) for a, b, sa, sb in zip(means, means[1:], ses, ses[1:]))


def _observables(cfg: StudyConfig) -> List[TestFunction]:
    try:
        return [parse_function(o) for o in cfg.observables]
    except ValueError as exc:
        raise ConfigError("observables", str(exc)) from None


def _initial(cfg: StudyConfig, lam: Optional[float] = None):
    try:
        return parse_measure(cfg.initial, lam)
    except ValueError as exc:
        raise ConfigError("initial", str(exc)) from None


def _workers(cfg: StudyConfig) -> int:
    return max(1, int(cfg.workers))


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------


def det_convergence_study(cfg: StudyConfig) -> StudyResult:
    """Mean W1 between the chain's empirical measure at T and the limit.

    The chain runs with ``time_factor = 1/s`` so that recorded time matches
    the limit's time variable; ``lambda = w r / s``.
    """
    if len(cfg.ladder) < 3:
        raise ConfigError("ladder", "det_convergence needs at least 3 rungs")
    s = cfg.model_value("s")
    r = cfg.model_value("r")
    w = cfg.model_value("w", 1.0)
    if s <= 0:
        raise ConfigError("model.s", "must be positive (lambda = w r / s is undefined at s = 0)")
    if r <= 0:
        raise ConfigError("model.r", "must be positive (lambda = w r / s must be positive)")
    lam = w * r / s
    mu0 = _initial(cfg, lam)
    limit = evolve(mu0, lam, cfg.T).measure
    threshold = float(cfg.option("threshold", 0.05))
    rows, timings = [], []
    for i, (m, n) in enumerate(cfg.ladder):
        t0 = time.perf_counter()
        params = ChainParams(m, n, s, r, w, 1.0 / s)
        ens = run_ensemble(discretize(mu0, n), params, cfg.T, [], [cfg.T], cfg.replicas, cfg.seed,
                           workers=_workers(cfg), key=(i,))
        d = np.array([wasserstein1(empirical_measure(ChainState(c, n)), limit)
                      for c in ens.final_counts])
        timings.append(time.perf_counter() - t0)
        rows.append({"rung": i, "m": m, "n": n, "s": s, "r": r, "w": w, "lambda": lam,
                     "T": cfg.T, "replicas": cfg.replicas, "seed": cfg.seed,
                     "mean_w1": float(d.mean()), "se_w1": _se(d)})
        log.info("det_convergence rung (%d,%d): mean W1 %.4g", m, n, rows[-1]["mean_w1"])
    means = [r_["mean_w1"] for r_ in rows]
    ses = [r_["se_w1"] for r_ in rows]
    verdicts = {"monotone": PASS if _nonincreasing(means, ses) else FAIL,
                "final_threshold": PASS if means[-1] < threshold else FAIL}
    return StudyResult(cfg.kind, cfg, list(rows[0]), rows, verdicts,
                       {"lambda": lam, "threshold": threshold}, timings)


def qv_scaling_study(cfg: StudyConfig) -> StudyResult:
    """Replica variance of ``M_T(f)`` against m at fixed n; slope of the log-log fit."""
    if len(cfg.ladder) < 2:
        raise ConfigError("ladder", "qv_scaling needs at least 2 rungs")
    s = cfg.model_value("s", 0.0)
    r = cfg.model_value("r", 0.0)
    w = cfg.model_value("w", 1.0)
    tf = cfg.model_value("time_factor", 1.0)
    fs = _observables(cfg)
    mu0 = _initial(cfg, w * r / s if s > 0 else None)
    tol = float(cfg.option("slope_tol", 0.2))
    rows, timings = [], []
    for i, (m, n) in enumerate(cfg.ladder):
        t0 = time.perf_counter()
        params = ChainParams(m, n, s, r, w, tf)
        ens = run_ensemble(discretize(mu0, n), params, cfg.T, fs, [cfg.T], cfg.replicas, cfg.seed,
                           workers=_workers(cfg), key=(i,))
        res = ens.residuals()[:, :, -1]
        qv = ens.qv_integral[:, :, -1]
        timings.append(time.perf_counter() - t0)
        for o, f in enumerate(fs):
            v = float(res[:, o].var(ddof=1))
            if v == 0.0:
                raise ConfigError("initial", f"degenerate: M_T({f.name}) has zero variance at m={m}")
            rows.append({"rung": i, "m": m, "n": n, "s": s, "r": r, "w": w, "T": cfg.T,
                         "observable": f.name, "replicas": cfg.replicas, "seed": cfg.seed,
                         "var_M": v, "se_var_M": variance_se(res[:, o]),
                         "mean_qv": float(qv[:, o].mean())})
    verdicts, slopes = {}, {}
    for f in fs:
        sub = [r_ for r_ in rows if r_["observable"] == f.name]
        slope = float(np.polyfit(np.log([r_["m"] for r_ in sub]), np.log([r_["var_M"] for r_ in sub]), 1)[0])
        slopes[f.name] = slope
        verdicts[f"slope[{f.name}]"] = PASS if abs(slope + 1.0) <= tol else FAIL
    return StudyResult(cfg.kind, cfg, list(rows[0]), rows, verdicts, {"slopes": slopes, "tol": tol}, timings)


def steady_state_study(cfg: StudyConfig) -> StudyResult:
    """W1 from ``evolve(mu0, lambda, T)`` to the classified long-time limit."""
    lam = cfg.model_value("lambda")
    if lam <= 0:
        raise ConfigError("model.lambda", "must be positive")
    mu0 = _initial(cfg, lam)
    horizons = [float(t) for t in cfg.option("horizons", [5.0, 10.0, 20.0])]
    threshold = float(cfg.option("threshold", 1e-2))
    tail = tail_of(mu0)
    verdict = classify_longtime(tail, lam)
    target = verdict.measure()
    rows, timings = [], []
    for T in horizons:
        t0 = time.perf_counter()
        d = wasserstein1(evolve(mu0, lam, T).measure, target)
        timings.append(time.perf_counter() - t0)
        rows.append({"T": T, "lambda": lam, "limit": str(verdict), "w1": float(d)})
    ds = [r_["w1"] for r_ in rows]
    verdicts = {"monotone": PASS if all(b < a or b == a == 0.0 for a, b in zip(ds, ds[1:])) else FAIL,
                "final_threshold": PASS if ds[-1] < threshold else FAIL}
    summary = {"tail": tail.to_dict(), "limit": verdict.to_dict(), "threshold": threshold}
    return StudyResult(cfg.kind, cfg, list(rows[0]), rows, verdicts, summary, timings)


def _cdf_observables(n: int) -> List[TestFunction]:
    def indicator(k):
        return lambda x: (x * n <= k + 0.5).astype(float)
    return [TestFunction(indicator(k), name=f"F[{k}]") for k in range(n)]


def exit_times(w1: np.ndarray, times: np.ndarray, threshold: float, horizon: float) -> np.ndarray:
    """First sample time with ``w1 > threshold`` per row, else ``horizon``."""
    hit = w1 > threshold
    first = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), times[first], horizon)


def quasi_invariance_study(cfg: StudyConfig) -> StudyResult:
    """Mean first time the empirical measure leaves a W1-ball around the
    discretized Beta law it was sampled from.

    The distance is checked on a time grid of spacing ``options.dt``; its
    value on E_n is ``(1/n) sum_k |F_emp(k/n) - F_ref(k/n)|``.
    """
    lam = cfg.model_value("lambda")
    alpha = cfg.model_value("alpha")
    try:
        spec = BetaSpec(lam, alpha)
    except ValueError as exc:
        raise ConfigError("model.alpha", str(exc)) from None
    s = cfg.model_value("s")
    r = cfg.model_value("r")
    w = cfg.model_value("w", 1.0)
    if s <= 0 or abs(w * r / s - lam) > 1e-9 * lam:
        raise ConfigError("model.lambda", f"must equal w r / s = {w * r / s if s > 0 else 'undefined'}")
    threshold = float(cfg.option("threshold", 0.1))
    if threshold <= 0:
        raise ConfigError("options.threshold", "must be positive")
    dt = float(cfg.option("dt", 0.1))
    if dt <= 0:
        raise ConfigError("options.dt", "must be positive")
    times = np.arange(0.0, cfg.T + dt / 2, dt)
    times = times[times <= cfg.T]
    rows, timings = [], []
    for i, (m, n) in enumerate(cfg.ladder):
        t0 = time.perf_counter()
        ref = discretized_beta(n, spec)
        fref = np.cumsum(ref.weights)[:-1]
        params = ChainParams(m, n, s, r, w, 1.0)
        ens = run_ensemble(ref, params, cfg.T, _cdf_observables(n), times, cfg.replicas, cfg.seed,
                           workers=_workers(cfg), key=(i,))
        w1 = np.abs(ens.values - fref[None, :, None]).sum(axis=1) / n
        ex = exit_times(w1, times, threshold, cfg.T)
        timings.append(time.perf_counter() - t0)
        rows.append({"rung": i, "m": m, "n": n, "lambda": lam, "alpha": alpha, "s": s, "r": r, "w": w,
                     "threshold": threshold, "T": cfg.T, "replicas": cfg.replicas, "seed": cfg.seed,
                     "mean_exit": float(ex.mean()), "se_exit": _se(ex),
                     "censored": float(np.mean(ex >= cfg.T))})
    means = [r_["mean_exit"] for r_ in rows]
    ses = [r_["se_exit"] for r_ in rows]
    verdicts = {"nondecreasing": PASS if _nondecreasing(means, ses) else WARN}
    return StudyResult(cfg.kind, cfg, list(rows[0]), rows, verdicts, {"dt": dt}, timings)


def fv_martingale_wrapper(cfg: StudyConfig) -> StudyResult:
    """Martingale-problem checks on each rung, plus Q-form identities."""
    fv = FVParams(sigma=cfg.model_value("sigma", 0.0), rho=cfg.model_value("rho", 0.0),
                  theta=cfg.model_value("theta", 1.0), w=cfg.model_value("w", 1.0))
    fs = _observables(cfg)
    mu0 = _initial(cfg)
    rows, timings = [], []
    qform_ok = True
    min_reps = int(cfg.option("min_replicas", 100))
    var_tol = float(cfg.option("var_tol", 0.2))
    for i, (m, n) in enumerate(cfg.ladder):
        t0 = time.perf_counter()
        nu0 = discretize(mu0, n)
        for o, f in enumerate(fs):
            a, b = limit_qv_forms(nu0, f, fv)
            qform_ok &= abs(a - b) <= QFORM_TOL * max(1.0, abs(a), abs(b))
            st = fv_martingale_study(nu0, m, n, fv, f, cfg.T, cfg.replicas, cfg.seed,
                                     min_replicas=min_reps, var_tol=var_tol,
                                     workers=_workers(cfg), key=(i, o))
            rows.append({"rung": i, "m": m, "n": n, **fv.to_dict(), "T": cfg.T, "observable": f.name,
                         "replicas": cfg.replicas, "seed": cfg.seed, "mean": st.mean, "se": st.se,
                         "var": st.var, "qv_mean": st.qv_mean, "limit_qv_mean": st.limit_qv_mean,
                         "mean_ok": st.mean_ok, "var_ok": st.var_ok, "limit_var_ok": st.limit_var_ok})
        timings.append(time.perf_counter() - t0)
    verdicts = {"mean": PASS if all(r_["mean_ok"] for r_ in rows) else FAIL,
                "var": PASS if all(r_["var_ok"] for r_ in rows) else FAIL,
                "limit_var": PASS if all(r_["limit_var_ok"] for r_ in rows) else FAIL,
                "qform": PASS if qform_ok else FAIL}
    return StudyResult(cfg.kind, cfg, list(rows[0]), rows, verdicts, {"fv": fv.to_dict()}, timings)


STUDIES = {
    "det_convergence": det_convergence_study,
    "qv_scaling": qv_scaling_study,
    "steady_state": steady_state_study,
    "quasi_invariance": quasi_invariance_study,
    "fv_martingale": fv_martingale_wrapper,
}


def run_study(cfg: StudyConfig) -> StudyResult:
    return STUDIES[cfg.kind](cfg)
