"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 200000] [--repeat 7]

Results are also checked for agreement so a stale build shows up here.
"""
import argparse
import timeit

import numpy as np

from neckforge import _kernels_py

try:
    from neckforge import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    nv = max(n // 2, 3)
    verts = rng.normal(size=(nv, 3))
    faces = rng.integers(0, nv, size=(n, 3)).astype(np.int64)
    weights = rng.uniform(0.5, 2.0, n)
    signal = np.cumsum(rng.normal(size=min(n, 20000))) * 1e-3
    return verts, faces, weights, signal


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000, help="number of triangles")
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    verts, faces, weights, signal = _inputs(args.n)
    cases = {
        "triangle_areas": lambda k: k.triangle_areas(verts, faces),
        "weighted_area": lambda k: k.weighted_area(verts, faces, weights),
        "holder_window_max": lambda k: k.holder_window_max(signal, 1e-3, 0.5, 64),
    }
    print(f"{'kernel':<20}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for name, call in cases.items():
        t_py = min(timeit.repeat(lambda: call(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<20}{t_py:>14.3f}{'n/a':>14}{'':>10}")
            continue
        ref, got = np.asarray(call(_kernels_py)), np.asarray(call(_ckernels))
        if not np.allclose(ref, got, rtol=1e-12, atol=0):
            raise SystemExit(f"{name}: backends disagree")
        t_c = min(timeit.repeat(lambda: call(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_py:>14.3f}{t_c:>14.3f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
