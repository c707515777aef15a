"""Test functions on [0, 1] carrying their first and second derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TestFunction:
    """A vectorised function with optional derivatives.

    ``f``, ``df`` and ``d2f`` take and return float arrays.  Operations that
    need a derivative raise ``ValueError`` when it is missing.
    """

    __test__ = False  # keep pytest from collecting this class

    f: ArrayFn
    df: Optional[ArrayFn] = None
    d2f: Optional[ArrayFn] = None
    name: str = "f"

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.f(x), dtype=float), x.shape)

    def d1(self, x) -> np.ndarray:
        if self.df is None:
            raise ValueError(f"test function {self.name!r} has no first derivative")
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.df(x), dtype=float), x.shape)

    def d2(self, x) -> np.ndarray:
        if self.d2f is None:
            raise ValueError(f"test function {self.name!r} has no second derivative")
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.d2f(x), dtype=float), x.shape)


def polynomial(coefs: Sequence[float], name: Optional[str] = None) -> TestFunction:
    """Polynomial ``sum(c_k x**k)`` with exact derivatives."""
    p = Polynomial(np.asarray(coefs, dtype=float))
    dp = p.deriv(1)
    d2p = p.deriv(2)
    return TestFunction(p, dp, d2p, name=name or f"poly{tuple(float(c) for c in coefs)}")


def constant(c: float = 1.0) -> TestFunction:
    return polynomial([c], name=f"const({c:g})")


def monomial(k: int) -> TestFunction:
    """``x**k``; named ``x^k`` (``x`` for k=1)."""
    if k < 0:
        raise ValueError("monomial degree must be nonnegative")
    coefs = [0.0] * k + [1.0]
    name = "1" if k == 0 else ("x" if k == 1 else f"x^{k}")
    return polynomial(coefs, name=name)


def parse(spec: str) -> TestFunction:
    """Parse a short test-function name: ``1``, ``x``, ``x^k``, ``const:c``."""
    spec = spec.strip()
    if spec == "1":
        return monomial(0)
    if spec == "x":
        return monomial(1)
    if spec.startswith("x^"):
        return monomial(int(spec[2:]))
    if spec.startswith("const:"):
        return constant(float(spec.split(":", 1)[1]))
    raise ValueError(f"unknown test function {spec!r}")
