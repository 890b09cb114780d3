#!/usr/bin/env python3
"""Timing comparison of the compiled and pure evaluation kernels.

The backend is chosen at import time (RISKMPC_BACKEND), so the script
re-runs itself once per backend in a child process and prints one table:
microseconds per objective+gradient evaluation and a full solve, per
(problem, risk, horizon) case.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--horizons 5 9 13]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def cases(horizons):
    from riskmpc import risk
    from riskmpc.sysmodel import make_example1, make_example2
    for N in horizons:
        yield f"example1/expectation/N={N}", make_example1(), risk.expectation(), N
        yield f"example2/kl(0.5)/N={N}", make_example2(), risk.kl_divergence(0.5), N


def run_worker(repeat, horizons):
    from riskmpc import kernels, tree
    from riskmpc.ensemble import Ensemble

    rows = []
    for name, p, spec, N in cases(horizons):
        t = tree.build_tree(p.noise, N)
        x0 = Ensemble.point(1.5)
        d, _, diag = tree.solve_ocp(p, t, x0, spec)
        # steady-state eval cost at the optimum
        t0 = time.perf_counter()
        for _ in range(repeat):
            tree.objective_and_gradient(p, t, x0, d, spec)
        per_eval = (time.perf_counter() - t0) / repeat * 1e6
        t0 = time.perf_counter()
        tree.solve_ocp(p, t, x0, spec)
        solve_s = time.perf_counter() - t0
        rows.append({"case": name, "nodes": t.node_count,
                     "eval_us": per_eval, "solve_s": solve_s,
                     "iters": diag["iterations"]})
    print(json.dumps({"backend": kernels.backend_name(), "rows": rows}))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--horizons", type=int, nargs="+", default=[5, 9, 13])
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        run_worker(args.repeat, args.horizons)
        return

    results = {}
    for backend in ("compiled", "pure"):
        env = dict(os.environ, RISKMPC_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--worker",
             "--repeat", str(args.repeat),
             "--horizons", *map(str, args.horizons)],
            env=env, capture_output=True, text=True, check=True)
        doc = json.loads(out.stdout.splitlines()[-1])
        if doc["backend"] != backend:
            sys.exit(f"requested {backend} backend but got {doc['backend']}; "
                     "is the extension built?")
        results[backend] = {r["case"]: r for r in doc["rows"]}

    width = max(len(c) for c in results["compiled"]) + 2
    print(f"{'case':<{width}} {'nodes':>7} {'compiled':>12} {'pure':>12} "
          f"{'speedup':>8}   solve c/p")
    for case, comp in results["compiled"].items():
        pure = results["pure"][case]
        print(f"{case:<{width}} {comp['nodes']:>7} "
              f"{comp['eval_us']:>9.1f} us {pure['eval_us']:>9.1f} us "
              f"{pure['eval_us'] / comp['eval_us']:>7.1f}x   "
              f"{comp['solve_s']:.3f}s / {pure['solve_s']:.3f}s")


if __name__ == "__main__":
    main()
