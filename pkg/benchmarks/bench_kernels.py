"""Compiled kernels versus the numpy fallback.

Run ``python benchmarks/bench_kernels.py``; prints the best-of-``repeat``
time per kernel and backend, the speedup, and a bit-identity check.
"""

import argparse
import time

import numpy as np

from hierbvm._backend import _kernels_py, compiled


def walk_case(n_walkers, block, seed=0):
    rng = np.random.default_rng(seed)
    m = 100
    fields = np.exp(rng.standard_normal((1, m, m)) * 0.5)
    args = dict(
        pos=rng.uniform(0.2, 0.8, (n_walkers, 2)),
        integral=np.zeros(n_walkers),
        state=np.zeros(n_walkers, dtype=np.int8),
        exit_pos=np.full((n_walkers, 2), np.nan),
        steps=np.zeros(n_walkers, dtype=np.int64),
        owner=np.zeros(n_walkers, dtype=np.int64),
        fields=fields,
        normals=rng.standard_normal((n_walkers, block, 2)),
    )
    return args


def run_walk(kern, case, dt=1e-4):
    c = {k: v.copy() for k, v in case.items()}
    kern.advance_square(c["pos"], c["integral"], c["state"], c["exit_pos"], c["steps"], c["owner"],
                        c["fields"], c["normals"], float(np.sqrt(dt)), dt, 746.0)
    return c


def mixture_case(n_out, n_in, p, seed=1):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n_out, p)), rng.standard_normal((n_in, p)),
            rng.standard_normal((n_in, p, 1)), np.eye(p) * 100.0)


def run_mixture(kern, case):
    x, eta, deta, prec = case
    score, log_mean = np.empty((x.shape[0], 1)), np.empty(x.shape[0])
    kern.mixture_scores(x, eta, deta, prec, score, log_mean)
    return score, log_mean


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--walkers", type=int, default=20000)
    ap.add_argument("--block", type=int, default=256)
    ap.add_argument("--outer", type=int, default=2000)
    ap.add_argument("--inner", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if compiled is None:
        raise SystemExit("compiled kernels are not built; run pip install -e . --no-build-isolation")

    walk = walk_case(args.walkers, args.block)
    steps = args.walkers * args.block
    t_c, out_c = best_of(lambda: run_walk(compiled, walk), args.repeat)
    t_p, out_p = best_of(lambda: run_walk(_kernels_py, walk), args.repeat)
    same = all(np.array_equal(out_c[k], out_p[k], equal_nan=True) for k in out_c)
    print(f"advance_square  {args.walkers} walkers x {args.block} steps")
    print(f"  cython  {t_c:8.3f} s  {steps / t_c:10.3g} steps/s")
    print(f"  python  {t_p:8.3f} s  {steps / t_p:10.3g} steps/s")
    print(f"  speedup {t_p / t_c:6.1f}x  bit-identical: {same}")

    mix = mixture_case(args.outer, args.inner, 1)
    t_c, (s_c, l_c) = best_of(lambda: run_mixture(compiled, mix), args.repeat)
    t_p, (s_p, l_p) = best_of(lambda: run_mixture(_kernels_py, mix), args.repeat)
    err = max(np.max(np.abs(s_c - s_p) / (1 + np.abs(s_p))), np.max(np.abs(l_c - l_p) / (1 + np.abs(l_p))))
    print(f"mixture_scores  {args.outer} outer x {args.inner} inner")
    print(f"  cython  {t_c:8.3f} s")
    print(f"  python  {t_p:8.3f} s")
    print(f"  speedup {t_p / t_c:6.1f}x  max rel diff: {err:.2e}")


if __name__ == "__main__":
    main()
