"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_backends.py [--walkers 2000] [--repeat 3]

Each kernel is run once per backend before timing so JIT compilation is
excluded.  Outputs are compared bit for bit.
"""
import argparse
import time

import numpy as np

from balanced_rwre import kernels, rng
from balanced_rwre.env import EnvSpec, generate
from balanced_rwre.stationary import periodize


def cases(walkers):
    env = generate(EnvSpec.iid_elliptic(2), 0, 40)
    tab = env.walk_table()
    x0 = np.zeros(2, np.int64)
    keys = rng.stream_keys(0, "bench", walkers)
    t = periodize(generate(EnvSpec.iid_elliptic(3), 0, 16), 16)
    phi = np.ones(t.n_sites)
    opened = np.random.default_rng(0).random(201 ** 2) < 0.45
    return {
        "run_stopped (exit r=20)": lambda: kernels.run_stopped(tab, x0, keys, 10**6,
                                                               kernels.NORM_L2, 20.0),
        "time_visits (n<=1000)": lambda: kernels.time_visits(tab, x0, x0, keys,
                                                             np.array([10, 100, 1000], np.int64)),
        "torus_push (33^3)": lambda: kernels.torus_push(phi, t.stay, t.axis, t.side, t.d),
        "label_clusters (201^2)": lambda: kernels.label_clusters(opened, 201, 2),
    }


def timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and (a.tobytes() == b.tobytes() or np.allclose(a, b, rtol=1e-13))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--walkers", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    print(f"{'kernel':28s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}  same")
    for name, fn in cases(args.walkers).items():
        res = {}
        for backend in ("numba", "numpy"):
            with kernels.use_backend(backend):
                fn()
                res[backend] = timed(fn, args.repeat)
        (tn, a), (tp, b) = res["numba"], res["numpy"]
        print(f"{name:28s} {tn:10.4f} {tp:10.4f} {tp / tn:8.1f}  {_same(a, b)}")


if __name__ == "__main__":
    main()
