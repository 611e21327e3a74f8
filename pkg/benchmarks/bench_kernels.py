"""Compare the compiled and numpy kernels on correlation maps and histograms.

Usage::

    python3 benchmarks/bench_kernels.py [--size 64] [--rho 7] [--repeat 5]

Prints one line per (kernel, backend) with the best-of-``repeat`` wall time
and the speed-up of the compiled path. Also checks that both backends agree.
"""

import argparse
import timeit

import numpy as np

from promptnoise.kernels import _pykernels

try:
    from promptnoise.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--rho", type=int, default=7)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--values", type=int, default=1_000_000)
    args = ap.parse_args()

    g = np.random.default_rng(0)
    r = args.rho // 2
    plane = g.standard_normal((args.size, args.size)) * 0.05
    xp = np.ascontiguousarray(np.pad(plane, 2 * r, mode="reflect"))
    vals = np.clip(g.standard_normal(args.values) * 0.1, -1.5, 1.5)

    cases = {
        "correlation_map": lambda m: m.correlation_map(xp, args.size, args.size, args.rho, 1e-12),
        "histogram_counts": lambda m: m.histogram_counts(vals, 256, -1.0, 1.0),
    }
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not available; timing the numpy fallback only")

    for name, fn in cases.items():
        times = {}
        outs = {}
        for bname, mod in backends.items():
            outs[bname] = np.asarray(fn(mod))
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        line = f"{name:18s} " + " ".join(f"{b}={t * 1e3:8.2f} ms" for b, t in times.items())
        if "cython" in times:
            diff = np.max(np.abs(outs["python"] - outs["cython"]))
            line += f"  speedup={times['python'] / times['cython']:5.2f}x  max|diff|={diff:.2e}"
        print(line)


if __name__ == "__main__":
    main()
