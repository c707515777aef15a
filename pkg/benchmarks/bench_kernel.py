"""Time the compiled event loop against the pure-Python fallback.

    python benchmarks/bench_kernel.py [--repeat 3]

Both implementations run the same paths from the same seeds; the script also
checks that their outputs agree bit for bit.
"""

import argparse
import time

import numpy as np

from twolevel import kernel
from twolevel.chain import ChainParams, ChainState, run_from_state
from twolevel.testfunctions import monomial

CASES = [
    ("m=n=20, T=1", ChainParams(20, 20, 0.1, 1.0, 1.0, 1.0), 1.0),
    ("m=n=50, T=1", ChainParams(50, 50, 0.1, 1.0, 1.0, 1.0), 1.0),
    ("m=n=100, T=1", ChainParams(100, 100, 1.0, 3.0, 1.0, 1.0), 1.0),
    ("m=n=50, FV scaling", ChainParams(50, 50, 0.02, 0.02, 1.0, 50.0), 0.5),
]


def one(impl, params, T, seed):
    counts = np.random.default_rng(seed).integers(0, params.n + 1, params.m)
    t0 = time.perf_counter()
    path = run_from_state(ChainState(counts, params.n), params, T, [monomial(1), monomial(2)],
                          np.linspace(0, T, 11), np.random.default_rng(seed), impl=impl)
    return time.perf_counter() - t0, path


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if kernel.compiled_run_chain is None:
        raise SystemExit("compiled kernel not built; run `pip install -e . --no-build-isolation`")

    print(f"{'case':22s} {'events':>9s} {'compiled s':>11s} {'python s':>10s} {'speedup':>8s}")
    for label, params, T in CASES:
        tc = tp = 0.0
        for seed in range(args.repeat):
            dc, pc = one(kernel.compiled_run_chain, params, T, seed)
            dp, pp = one(kernel.python_run_chain, params, T, seed)
            if not (np.array_equal(pc.values, pp.values) and pc.n_events == pp.n_events):
                raise SystemExit(f"{label}: implementations disagree at seed {seed}")
            tc, tp = tc + dc, tp + dp
        print(f"{label:22s} {pc.n_events:9d} {tc / args.repeat:11.4f} {tp / args.repeat:10.4f} "
              f"{tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
