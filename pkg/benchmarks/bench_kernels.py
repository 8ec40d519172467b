#!/usr/bin/env python3
"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 1024] [--csv out.csv]
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from certdispatch import _pykernels

try:
    from certdispatch import _ckernels
except ImportError:
    _ckernels = None


def cases(batch, rng):
    G, E = 54, 186
    p_lo = np.zeros(G)
    p_hi = rng.uniform(50, 300, G)
    p_tilde = rng.uniform(0, 1, (batch, G)) * p_hi
    total = rng.uniform(0.2, 0.9, batch) * p_hi.sum()
    p_hat, eta, code = _pykernels.proportional_response(p_tilde, total, p_lo, p_hi)
    grad = rng.standard_normal((batch, G))
    x = rng.standard_normal((batch, E)) * 5
    lo = np.full(E, -3.0)
    hi = np.full(E, 4.0)
    pf = rng.standard_normal((batch, E)) * 100
    s = np.full(E, 0.01)
    m, n = 300, 600
    x_b = rng.uniform(0, 10, m)
    delta = rng.standard_normal(m)
    lb = np.zeros(m)
    ub = np.full(m, 20.0)
    basis = rng.permutation(n)[:m].astype(np.int64)
    return {
        "double_softplus": lambda k: k.double_softplus(x, lo, hi),
        "proportional_response": lambda k: k.proportional_response(p_tilde, total, p_lo, p_hi),
        "proportional_response_vjp": lambda k: k.proportional_response_vjp(
            grad, p_tilde, total, p_lo, p_hi, eta, code),
        "smooth_split": lambda k: k.smooth_split(x, s),
        "hard_split": lambda k: k.hard_split(x),
        "overflow": lambda k: k.overflow(pf, lo * 30, hi * 30),
        "ratio_test": lambda k: k.ratio_test(x_b, delta, lb, ub, 1e-9, np.inf, False, basis),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e .` first", file=sys.stderr)
        return 1

    rows = []
    for name, fn in cases(args.batch, np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat))
        rows.append((name, t_py, t_c, t_py / t_c))

    print(f"{'kernel':28s} {'python (us)':>12s} {'compiled (us)':>14s} {'ratio':>7s}")
    for name, t_py, t_c, r in rows:
        print(f"{name:28s} {t_py * 1e6:12.1f} {t_c * 1e6:14.1f} {r:7.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "python_s", "compiled_s", "ratio"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
