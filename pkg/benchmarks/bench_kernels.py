"""Compiled per-site kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--sites 20000] [--repeat 5]

Both backends are imported directly, so one process compares them; the
package itself picks the compiled one unless ASDLAB_PURE_PYTHON is set.
"""

import argparse
import timeit

import numpy as np

from asdlab import _kernels_fallback as fallback

try:
    from asdlab import _kernels as compiled
except ImportError:
    compiled = None


def inputs(P, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(P, 4, 4))
    g = np.einsum("pab,pcb->pac", A, A) + 4.0 * np.eye(4)
    ginv = np.ascontiguousarray(np.linalg.inv(g))
    dg = rng.normal(size=(P, 4, 4, 4))
    dg = np.ascontiguousarray(0.5 * (dg + np.swapaxes(dg, 2, 3)))
    G = np.ascontiguousarray(fallback.christoffel(ginv, dg))
    dG = rng.normal(size=(P, 4, 4, 4, 4))
    dG = np.ascontiguousarray(0.5 * (dG + np.swapaxes(dG, 3, 4)))
    return {"christoffel": (ginv, dg), "riemann": (G, dG)}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sites", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    data = inputs(args.sites)
    print(f"{'kernel':12s} {'numpy [ms]':>11s} {'cython [ms]':>12s} {'speedup':>8s} {'max diff':>10s}")
    for name, xs in data.items():
        ref = getattr(fallback, name)
        t_ref = min(timeit.repeat(lambda: ref(*xs), number=1, repeat=args.repeat))
        if compiled is None:
            print(f"{name:12s} {1e3 * t_ref:11.2f} {'n/a':>12s}")
            continue
        fast = getattr(compiled, name)
        t_fast = min(timeit.repeat(lambda: fast(*xs), number=1, repeat=args.repeat))
        diff = float(np.max(np.abs(np.asarray(fast(*xs)) - ref(*xs))))
        print(f"{name:12s} {1e3 * t_ref:11.2f} {1e3 * t_fast:12.2f} {t_ref / t_fast:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
