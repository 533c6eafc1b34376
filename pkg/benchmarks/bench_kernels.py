"""Compare the compiled and numpy kernel backends.

Two measurements: the landmark linearization kernel on synthetic problems
of increasing size, and a full baseline scenario run end to end.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from semistatic_vem import cli, kernels, sim


def _landmark_problem(k, rng):
    n_pose, n_lm = 10, max(1, k // 4)
    n = 3 * n_pose + 2 * n_lm
    x = rng.normal(size=n)
    i_pose = np.ascontiguousarray(3 * rng.integers(0, n_pose, k), dtype=np.int64)
    i_lm = np.ascontiguousarray(3 * n_pose + 2 * rng.integers(0, n_lm, k), dtype=np.int64)
    obs = np.ascontiguousarray(rng.normal(size=(k, 2)))
    w = np.ascontiguousarray(rng.uniform(0.1, 1.0, k))
    return n, x, i_pose, i_lm, obs, w


def bench_kernel(backend, k, repeat):
    mod = kernels.load_backend(backend)
    n, x, i_pose, i_lm, obs, w = _landmark_problem(k, np.random.default_rng(0))

    def once():
        H, g = np.zeros((n, n)), np.zeros(n)
        mod.landmark_linearize(x, i_pose, i_lm, obs, w, H, g)

    return min(timeit.repeat(once, number=20, repeat=repeat)) / 20


def bench_run(backend, repeat):
    scenario = sim.preset("baseline_6m4s")
    saved = kernels.impl
    kernels.impl = kernels.load_backend(backend)
    try:
        return min(timeit.repeat(lambda: cli.run_scenario(scenario), number=1, repeat=repeat))
    finally:
        kernels.impl = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (import-time choice: {kernels.BACKEND})")
    print(f"{'case':<28}" + "".join(f"{b:>12}" for b in backends))
    for k in (50, 500, 5000):
        row = [bench_kernel(b, k, args.repeat) for b in backends]
        print(f"{f'landmark_linearize K={k}':<28}" + "".join(f"{t * 1e6:>10.1f}us" for t in row))
    row = [bench_run(b, args.repeat) for b in backends]
    print(f"{'baseline_6m4s run':<28}" + "".join(f"{t:>11.3f}s" for t in row))


if __name__ == "__main__":
    main()
