"""Command-line interface.

Subcommands::

    twolevel simulate --m 10 --n 10 --s 0.1 --r 1 --w 1 --T 1 --seed 42
    twolevel solve    --initial beta:3,1 --lambda 3 --times 0,1,10
    twolevel classify --initial example3 --lambda 1.5
    twolevel study    --config study.yaml
    twolevel oracle   --example 2 --lambda 3 --times 0.5,2

Every subcommand also accepts ``--config FILE`` (YAML); its keys are the flag
names with dashes replaced by underscores.  A flag given on the command line
wins over the same key in the file.  Outputs go to ``--output-dir``, which
defaults to ``$TWOLEVEL_OUTPUT_DIR`` or the current directory.

Exit codes: 0 success, 1 invalid input, 2 numerical resolution failure,
3 a study verdict failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from . import kernel
from .chain import ChainParams, simulate
from .harness import ConfigError, StudyConfig, run_study
from .initial import SpecError, parse_measure
from .limit import (StepSizeError, Unclassifiable, classification_json, classify_longtime,
                    density_snapshot_csv, evolve, reference_solution, tail_of)
from .measures import (EvaluationError, GridDensity, MeasureError, ResolutionError, discretize,
                       mean, to_dict)
from .testfunctions import parse as parse_function

log = logging.getLogger("twolevel")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_VERDICT = 0, 1, 2, 3
OUTPUT_ENV = "TWOLEVEL_OUTPUT_DIR"


class UsageError(Exception):
    """Bad command line or configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _uint64(text: str) -> int:
    try:
        v = int(text)
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _float_list(text) -> List[float]:
    if isinstance(text, (list, tuple)):
        return [float(t) for t in text]
    if isinstance(text, (int, float)):
        return [float(text)]
    return [float(t) for t in str(text).split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file with default values for the flags")
    common.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_ENV} or .)")
    common.add_argument("--seed", type=_uint64, help="master seed (64-bit unsigned)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")

    p = _Parser(prog="twolevel", description="Two-level Moran selection: simulation and limits.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="simulate the chain and write a path CSV")
    s.add_argument("--m", type=int, help="number of groups")
    s.add_argument("--n", type=int, help="individuals per group")
    s.add_argument("--s", type=float, help="individual selection coefficient")
    s.add_argument("--r", type=float, help="group selection coefficient")
    s.add_argument("--w", type=float, help="group/individual event-rate ratio")
    s.add_argument("--time-factor", type=float, help="rate multiplier (default 1)")
    s.add_argument("--T", type=float, help="horizon")
    s.add_argument("--initial", help="initial measure (mini-language, default uniform)")
    s.add_argument("--observables", help="comma-separated test functions (default x)")
    s.add_argument("--times", help="comma-separated sample times (default 11 points on [0, T])")

    v = sub.add_parser("solve", parents=[common], help="evaluate the deterministic limit")
    v.add_argument("--initial", help="initial measure (mini-language)")
    v.add_argument("--lambda", dest="lam", type=float, help="lambda = w r / s")
    v.add_argument("--times", help="comma-separated times")

    c = sub.add_parser("classify", parents=[common], help="long-time limit of an initial measure")
    c.add_argument("--initial", help="initial measure (mini-language)")
    c.add_argument("--lambda", dest="lam", type=float, help="lambda = w r / s")

    st = sub.add_parser("study", parents=[common], help="run a study from a YAML config")
    st.add_argument("--workers", type=int, help="worker processes for replicas")

    o = sub.add_parser("oracle", parents=[common], help="closed-form reference solution snapshots")
    o.add_argument("--example", type=int, help="example id 1..5")
    o.add_argument("--lambda", dest="lam", type=float, help="lambda")
    o.add_argument("--times", help="comma-separated times")
    o.add_argument("--x0", type=float, help="example 1 starting point")
    o.add_argument("--c", type=float, help="example 4 cutoff")
    o.add_argument("--alpha", type=float, help="example 5 tail exponent")
    o.add_argument("--a", type=float, help="example 5 weight of delta_0")
    return p


_NOT_CONFIG = {"command", "verbose"}


def _merge(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags over config-file values; logs a notice when both are given."""
    vals = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if not args.config or args.command == "study":
        return vals
    try:
        with open(args.config) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}", "config") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config: {exc}", "config") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a mapping", "config")
    for key, value in cfg.items():
        k = key.replace("-", "_")
        if k == "lambda":
            k = "lam"
        if k not in vals or k == "config":
            raise UsageError(f"unknown configuration key {key!r}", key)
        if vals[k] is None:
            vals[k] = value
        else:
            log.warning("flag --%s overrides config value %r", k.replace("_", "-"), value)
    return vals


def _require(vals, key, flag=None):
    if vals.get(key) is None:
        raise UsageError(f"missing required value --{flag or key.replace('_', '-')}", flag or key)
    return vals[key]


def _output_dir(vals) -> Path:
    out = Path(vals.get("output_dir") or os.environ.get(OUTPUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _lam(vals) -> float:
    lam = float(_require(vals, "lam", "lambda"))
    if not (lam > 0 and math.isfinite(lam)):
        raise UsageError("lambda must be positive", "lambda")
    return lam


def _times(vals, key="times") -> List[float]:
    try:
        ts = _float_list(_require(vals, key))
    except ValueError:
        raise UsageError("times must be a comma-separated list of numbers", key) from None
    if not ts or any(t < 0 or not math.isfinite(t) for t in ts):
        raise UsageError("times must be finite and nonnegative", key)
    return ts


def _snapshot(mu, t: float) -> dict:
    return {"t": t, "mean": mean(mu), "measure": to_dict(mu)}


def cmd_simulate(vals) -> int:
    m, n = int(_require(vals, "m")), int(_require(vals, "n"))
    T = float(_require(vals, "T"))
    try:
        params = ChainParams(m, n, float(vals.get("s") or 0.0), float(vals.get("r") or 0.0),
                             float(vals["w"] if vals.get("w") is not None else 1.0),
                             float(vals.get("time_factor") or 1.0))
    except ValueError as exc:
        raise UsageError(str(exc), "params") from None
    if T < 0:
        raise UsageError("T must be nonnegative", "T")
    seed = int(vals["seed"]) if vals.get("seed") is not None else 0
    mu0 = parse_measure(vals.get("initial") or "uniform", params.lam if params.s > 0 else None)
    obs = [parse_function(f) for f in str(vals.get("observables") or "x").split(",")]
    times = _times(vals) if vals.get("times") is not None else list(np.linspace(0.0, T, 11))
    if max(times) > T:
        raise UsageError("sample times must not exceed T", "times")
    path = simulate(discretize(mu0, n), params, T, obs, sorted(times), np.random.default_rng(seed))
    out = _output_dir(vals)
    path.to_csv(out / "simulate.csv")
    manifest = {"params": params.to_dict(), "seed": seed, "initial": vals.get("initial") or "uniform",
                "T": T, "observables": path.names, "n_events": int(path.n_events),
                "absorbed": bool(path.absorbed), "kernel": kernel.IMPLEMENTATION}
    (out / "simulate.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %s", out / "simulate.csv")
    return EXIT_OK


def cmd_solve(vals) -> int:
    lam = _lam(vals)
    mu0 = parse_measure(_require(vals, "initial"), lam)
    out = _output_dir(vals)
    snaps = []
    for i, t in enumerate(_times(vals)):
        mu = evolve(mu0, lam, t).measure
        snaps.append(_snapshot(mu, t))
        if isinstance(mu, GridDensity):
            density_snapshot_csv(mu, out / f"solve_density_{i}.csv")
    (out / "solve.json").write_text(json.dumps({"lambda": lam, "initial": vals["initial"],
                                                 "snapshots": snaps}, indent=2))
    for s in snaps:
        print(f"t={s['t']:g} mean={s['mean']:.12g}")
    return EXIT_OK


def cmd_classify(vals) -> int:
    lam = _lam(vals)
    mu0 = parse_measure(_require(vals, "initial"), lam)
    tail = tail_of(mu0)
    verdict = classify_longtime(tail, lam)
    text = classification_json(lam, tail, verdict)
    (_output_dir(vals) / "classify.json").write_text(text)
    print(text)
    return EXIT_OK


def cmd_study(vals) -> int:
    cfg_path = _require(vals, "config")
    cfg = StudyConfig.from_yaml(cfg_path)
    if vals.get("seed") is not None:
        if cfg.seed != vals["seed"]:
            log.warning("flag --seed overrides config value %r", cfg.seed)
        cfg.seed = int(vals["seed"])
    if vals.get("workers") is not None:
        cfg.workers = int(vals["workers"])
    out = Path(vals.get("output_dir") or cfg.output or os.environ.get(OUTPUT_ENV) or ".")
    result = run_study(cfg)
    csv_path, _ = result.write(out)
    for name, v in result.verdicts.items():
        print(f"{cfg.kind}.{name}: {v}")
    log.info("wrote %s", csv_path)
    return EXIT_OK if result.passed else EXIT_VERDICT


def cmd_oracle(vals) -> int:
    lam = _lam(vals)
    ex = int(_require(vals, "example"))
    params = {k: float(vals[k]) for k in ("x0", "c", "alpha", "a") if vals.get(k) is not None}
    snaps = []
    for t in _times(vals):
        snaps.append(_snapshot(reference_solution(ex, lam, t, **params), t))
    text = json.dumps({"example": ex, "lambda": lam, "params": params, "snapshots": snaps}, indent=2)
    (_output_dir(vals) / "oracle.json").write_text(text)
    for s in snaps:
        print(f"t={s['t']:g} mean={s['mean']:.12g}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "classify": cmd_classify,
            "study": cmd_study, "oracle": cmd_oracle}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and dispatch; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](_merge(args))
    except UsageError as exc:
        where = f" [{exc.key}]" if exc.key else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"error [{exc.key}]: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ResolutionError, StepSizeError, EvaluationError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, MeasureError, Unclassifiable, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
