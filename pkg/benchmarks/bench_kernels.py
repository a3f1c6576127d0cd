#!/usr/bin/env python3
"""Compare the numba-compiled kernels with the pure numpy fallback.

The backend is fixed at import time, so each backend runs in its own child
process with ``SMOOTHSQP_DISABLE_NUMBA`` set accordingly. Each child times

  * ``boltzmann_sums`` on a quadrature-sized batch of cells,
  * ``solve_penalized_qp`` on a batch of random elastic QPs,
  * one full ``ex3_14`` solve (quadrature plus QPs),

reporting the first call (which includes JIT compilation when the cache is
cold) separately from the median of the remaining repeats.

Usage:
    python benchmarks/bench_kernels.py [--repeats R] [--cells C] [--qps Q] [--json PATH]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _time(fn, repeats):
    t0 = time.perf_counter()
    fn()
    first = time.perf_counter() - t0
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return first, float(np.median(times))


def child(args):
    from smoothsqp import kernels
    from smoothsqp._accel import USE_NUMBA
    from smoothsqp.bilevel import build_combined_program
    from smoothsqp.driver import SolverConfig, run_solver
    from smoothsqp.qp import QpData, solve_penalized_qp
    from smoothsqp.registry import registry_lookup

    rng = np.random.default_rng(0)
    C, K = args.cells, 16
    fvals = rng.uniform(-1, 1, (C, K))
    gradx = rng.uniform(-1, 1, (C, K, 1))
    weights = rng.uniform(0, 1, (C, K))

    def boltzmann():
        kernels.boltzmann_sums(fvals, gradx, weights, -1.0, 50.0)

    qps = []
    for _ in range(args.qps):
        n, p, q = 3, 2, 1
        A = rng.standard_normal((n, n))
        qps.append(QpData(n, A @ A.T + np.eye(n), rng.standard_normal(n), rng.standard_normal(p),
                          rng.standard_normal((p, n)), rng.standard_normal(q), rng.standard_normal((q, n)), 10.0))

    def qp_batch():
        for qp in qps:
            solve_penalized_qp(qp)

    entry = registry_lookup("ex3_14")

    def full_solve():
        prob = build_combined_program(entry.build())
        run_solver(prob, entry.x0, SolverConfig(**entry.solver_defaults))

    out = {"numba": USE_NUMBA}
    for name, fn, reps in (("boltzmann_sums", boltzmann, args.repeats),
                           ("qp_batch", qp_batch, args.repeats),
                           ("ex3_14_solve", full_solve, max(1, args.repeats // 5))):
        first, med = _time(fn, reps)
        out[name] = {"first": first, "median": med}
    print(json.dumps(out))


def run_backend(disable: bool, argv):
    env = dict(os.environ)
    env["SMOOTHSQP_DISABLE_NUMBA"] = "1" if disable else "0"
    proc = subprocess.run([sys.executable, __file__, "--child", *argv], env=env, capture_output=True, text=True,
                          check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=10)
    parser.add_argument("--cells", type=int, default=4000)
    parser.add_argument("--qps", type=int, default=200)
    parser.add_argument("--json", help="write the raw timings here")
    parser.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.child:
        child(args)
        return

    argv = ["--repeats", str(args.repeats), "--cells", str(args.cells), "--qps", str(args.qps)]
    numpy_res = run_backend(True, argv)
    numba_res = run_backend(False, argv)
    if not numba_res["numba"]:
        print("numba is not importable; only the numpy backend ran")

    print(f"{'kernel':16s} {'numpy median':>13s} {'numba median':>13s} {'speedup':>8s} {'numba first':>12s}")
    for key in ("boltzmann_sums", "qp_batch", "ex3_14_solve"):
        a, b = numpy_res[key], numba_res[key]
        print(f"{key:16s} {a['median']:13.5f} {b['median']:13.5f} {a['median'] / b['median']:8.2f} "
              f"{b['first']:12.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numpy": numpy_res, "numba": numba_res}, fh, indent=2)


if __name__ == "__main__":
    main()
