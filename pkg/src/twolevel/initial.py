"""One-token descriptions of initial measures.

Grammar::

    delta:x            point mass at x
    uniform            uniform density on [0, 1]
    linear             density 2(1 - x)
    truncated:c        uniform on [0, c], c < 1
    beta:lam,alpha     Beta(lam - alpha, alpha)
    example1:x0        delta at x0
    example2           uniform
    example3           2(1 - x)
    example4:c         uniform on [0, c]
    example5:alpha,a   a delta_0 + (1 - a) Beta(lam - alpha, alpha); needs lam
    mixture:[w1*spec1;w2*spec2;...]
"""

from __future__ import annotations

from typing import List, Optional

from .limit import example_initial
from .measures import Beta, BetaSpec, MeasureError, Mixture, delta, linear_decreasing, truncated_uniform, uniform


class SpecError(ValueError):
    """Malformed initial-measure description."""


def _floats(arg: str, count: int, token: str) -> List[float]:
    parts = [p for p in arg.split(",") if p.strip()] if arg else []
    if len(parts) != count:
        raise SpecError(f"{token!r}: expected {count} numeric argument(s)")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise SpecError(f"{token!r}: arguments must be numbers") from None


def _split_top(body: str) -> List[str]:
    """Split on ';' outside brackets."""
    out, depth, cur = [], 0, []
    for ch in body:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == ";" and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return [p.strip() for p in out if p.strip()]


def parse_measure(token: str, lam: Optional[float] = None):
    """Build the measure described by ``token``; ``lam`` is needed by example5."""
    token = token.strip()
    head, _, arg = token.partition(":")
    head = head.strip().lower()
    try:
        if head == "delta":
            (x,) = _floats(arg, 1, token)
            return delta(x)
        if head in ("uniform", "example2"):
            return uniform()
        if head in ("linear", "example3"):
            return linear_decreasing()
        if head in ("truncated", "example4"):
            (c,) = _floats(arg, 1, token) if arg or head == "truncated" else (0.8,)
            return truncated_uniform(c)
        if head == "beta":
            lam_b, alpha = _floats(arg, 2, token)
            return Beta(BetaSpec(lam_b, alpha))
        if head == "example1":
            (x0,) = _floats(arg, 1, token)
            return example_initial(1, x0=x0)
        if head == "example5":
            if lam is None:
                raise SpecError("example5 needs lambda")
            alpha, a = _floats(arg, 2, token)
            return example_initial(5, lam, alpha=alpha, a=a)
        if head == "mixture":
            body = arg.strip()
            if not (body.startswith("[") and body.endswith("]")):
                raise SpecError(f"{token!r}: mixture components go in [...]")
            comps = []
            for part in _split_top(body[1:-1]):
                w, star, sub = part.partition("*")
                if not star:
                    raise SpecError(f"mixture component {part!r} needs the form weight*spec")
                comps.append((float(w), parse_measure(sub, lam)))
            return Mixture(comps, normalize=True)
    except (MeasureError, ValueError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"{token!r}: {exc}") from None
    raise SpecError(f"unknown initial measure {token!r}")
