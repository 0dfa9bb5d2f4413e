"""Compiled versus pure-Python kernels.

Runs the bisimulation refinement on the cruise-control controller
abstraction and a long linear rollout with every available backend, checks
that they agree and prints wall times.

    python benchmarks/bench_kernels.py --half-width 2 --input-half-width 0.3
"""
import argparse
import time

import numpy as np

from passlab import kernels
from passlab.abstraction import (
    AbstractionParams,
    SymbolicModel,
    build_truncated_ts,
    candidate_pairs,
    label_neighbours,
    sampled_reference_ts,
)
from passlab.systems import LinearSystem, zoh_discretize

CONTROLLER = LinearSystem([[-1.0, -1.0], [1.0, -2.0]], [[0.0], [1.0]], [[-0.5, -0.5]], [[2.0]])


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench_refine(half_width, input_half_width, repeats):
    params = AbstractionParams(tau=0.3, mu=0.1, eta=0.1, eps=0.9)
    box = ([-half_width] * 2, [half_width] * 2)
    ubox = ([-input_half_width], [input_half_width])
    T2 = build_truncated_ts(SymbolicModel(CONTROLLER, params), box, ubox)
    T1 = sampled_reference_ts(CONTROLLER, params, box, ubox, refine=2)
    ptr, q2 = candidate_pairs(T1, T2, params.eps)
    nbr_ptr, nbr_lab = label_neighbours(T1.label_embed, params.mu)
    print(f"refine_relation: {T1.n_states} x {T2.n_states} states, {T1.n_labels} labels, "
          f"{len(q2)} candidate pairs")
    results = {}
    for name, impl in kernels.backends().items():
        def run():
            alive = np.ones(len(q2), dtype=np.uint8)
            sweeps, removed = kernels.refine_relation(ptr, q2, alive, T1._csr(), T2._csr(),
                                                      nbr_ptr, nbr_lab, impl=impl)
            return alive, sweeps, removed
        t, (alive, sweeps, removed) = best_of(run, repeats)
        results[name] = (t, alive)
        print(f"  {name:9s} {t:9.4f} s  sweeps={sweeps} removed={removed}")
    return results


def bench_rollout(steps, repeats):
    sd = zoh_discretize(CONTROLLER, 0.3)
    U = np.random.default_rng(0).uniform(-1, 1, size=(steps, 1))
    x0 = np.array([1.4, -3.0])
    print(f"lti_rollout: {steps} steps")
    results = {}
    for name, impl in kernels.backends().items():
        t, X = best_of(lambda: kernels.lti_rollout(sd.A, sd.B, x0, U, impl=impl), repeats)
        results[name] = (t, X)
        print(f"  {name:9s} {t:9.4f} s")
    return results


def report_speedup(label, results, same):
    if "compiled" not in results:
        print(f"  {label}: compiled backend not built")
        return
    (tp, op), (tc, oc) = results["python"], results["compiled"]
    print(f"  {label}: speedup x{tp / tc:.1f}, outputs agree: {same(op, oc)}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--half-width", type=float, default=2.0, help="state box half-width")
    ap.add_argument("--input-half-width", type=float, default=0.3)
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    print(f"default backend: {kernels.BACKEND}")
    ref = bench_refine(args.half_width, args.input_half_width, args.repeats)
    report_speedup("refine_relation", ref, np.array_equal)
    roll = bench_rollout(args.steps, args.repeats)
    report_speedup("lti_rollout", roll, lambda a, b: np.allclose(a, b, rtol=1e-12, atol=1e-12))


if __name__ == "__main__":
    main()
