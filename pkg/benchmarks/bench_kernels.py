"""Time the compiled loop kernels against their vectorised numpy forms.

    python3 benchmarks/bench_kernels.py [--rollouts 100000] [--repeat 3]

Run once as is and once with PROBE_RELEASE_BACKEND=numpy to see the cost of
the fallback (the loop forms then run as plain Python, so keep sizes small).
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from probe_release import _backend, kernels

TRUE = (0.65, 9.0, 9.0 + 5 / 0.65, 10.5)


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--rollouts", type=int, default=100_000)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    n, M, s = args.rollouts, args.steps, 7
    x = np.zeros(s + 2)
    x[0] = 17.0
    x[1 : s + 1] = 14.0
    x[-1] = 12 * 14.0
    A = rng.uniform(1.8, 5.4, (n, M))
    B = rng.uniform(1.8, 5.4, (n, M))
    eps = rng.uniform(-2, 2, (n, M))
    theta = rng.normal(10.5, 1.0, (n, 3))
    m = max(n // 100, 1)
    A2, B2, e2 = (v[:m].repeat(100, axis=1) for v in (A, B, eps))

    cases = {
        f"rollout_flow_means n={n} M={M}": (
            lambda: kernels.rollout_flow_means_loop(x, A, B, eps, TRUE, TRUE),
            lambda: kernels.rollout_flow_means_numpy(x, A, B, eps, TRUE, TRUE),
        ),
        f"uncoordinated_l1 n={m} T={M * 100}": (
            lambda: kernels.uncoordinated_l1_loop(x, A2, B2, e2, TRUE),
            lambda: kernels.uncoordinated_l1_numpy(x, A2, B2, e2, TRUE),
        ),
        f"ewma_rounds N={n} k=3": (
            lambda: kernels.ewma_rounds_loop(theta, 0.08, 10.0),
            lambda: kernels.ewma_rounds_numpy(theta, 0.08, 10.0),
        ),
    }
    print(f"backend: {_backend.BACKEND}")
    print(f"{'kernel':40s} {'loop [s]':>10s} {'numpy [s]':>10s} {'ratio':>8s}")
    for name, (loop, vec) in cases.items():
        tl = best_of(loop, args.repeat)
        tv = best_of(vec, args.repeat)
        print(f"{name:40s} {tl:10.4f} {tv:10.4f} {tv / tl:8.2f}")


if __name__ == "__main__":
    main()
