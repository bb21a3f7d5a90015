"""Compare numba and numpy implementations of the two hot kernels.

    python benchmarks/bench_kernels.py [--rays 20000] [--repeat 5]

Both paths are called directly, so the env flag is not needed here.
"""
import argparse
import time

import numpy as np

from sveavatar import sampler, scene
from sveavatar._accel import HAS_NUMBA


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_trace(n_rays, repeat):
    sc = scene.make_scene(0)
    rng = np.random.default_rng(0)
    eye = np.array([0.0, 0.0, 3.6])
    target = rng.uniform(-0.8, 0.8, size=(n_rays, 3))
    dirs = target - eye
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    eps = rng.uniform(-1, 1, sc.n_expr)
    rows = {"numpy": _best(lambda: scene.sphere_trace(sc, eye, dirs, eps, use_numba=False), repeat)}
    if HAS_NUMBA:
        scene.sphere_trace(sc, eye, dirs, eps, use_numba=True)  # compile
        rows["numba"] = _best(lambda: scene.sphere_trace(sc, eye, dirs, eps, use_numba=True), repeat)
        a = scene.sphere_trace(sc, eye, dirs, eps, use_numba=True)
        b = scene.sphere_trace(sc, eye, dirs, eps, use_numba=False)
        assert np.array_equal(a[1], b[1]) and np.allclose(a[0][a[1]], b[0][b[1]])
    return rows


def bench_gather(n_draws, repeat):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=(256, 256))
    areas = sampler.region_areas(labels, 4)
    order = np.argsort(labels.ravel(), kind="stable")
    offsets = np.concatenate([[0], np.cumsum(areas)[:-1]]).astype(np.int64)
    regions = rng.integers(0, 4, size=n_draws).astype(np.int64)
    u = rng.random(n_draws)
    args = (order, offsets, areas, regions, u)
    rows = {"numpy": _best(lambda: sampler._gather_numpy(*args), repeat)}
    if HAS_NUMBA:
        sampler._gather_region_pixels(*args)
        rows["numba"] = _best(lambda: sampler._gather_region_pixels(*args), repeat)
        assert np.array_equal(sampler._gather_region_pixels(*args), sampler._gather_numpy(*args))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rays", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    print(f"numba available: {HAS_NUMBA}")
    for name, rows in (("sphere_trace", bench_trace(a.rays, a.repeat)),
                       ("sampler gather", bench_gather(a.rays * 50, a.repeat))):
        line = "  ".join(f"{k}={v * 1e3:8.2f} ms" for k, v in rows.items())
        if "numba" in rows:
            line += f"  speedup={rows['numpy'] / rows['numba']:.1f}x"
        print(f"{name:15s} {line}")


if __name__ == "__main__":
    main()
