"""Times the numba kernels against their numpy twins.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Both flavours are imported directly from ood3d.kernels, so the env flag does
not matter here. The first numba call (compilation) is excluded.
"""
import argparse
import timeit

import numpy as np

from ood3d import kernels
from ood3d._accel import HAS_NUMBA


def cases(rng):
    xyz = rng.uniform(-10, 10, size=(200_000, 3))
    grid = rng.normal(size=(72, 72, 192)).astype(np.float32)
    dist = rng.uniform(0, 5, size=(60, 60))
    order = np.argsort(-rng.random(60)).astype(np.int64)
    cost = rng.random((128, 128))
    unit = rng.uniform(-0.5, 0.5, size=(5000, 3))
    perm = rng.permutation(5000).astype(np.int64)
    return {
        "points_in_box (200k pts)": (kernels._points_in_box_nb, kernels._points_in_box_np,
                                     (xyz, 1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.3)),
        "maxpool3x3 (72x72x192)": (kernels._maxpool3x3_nb, kernels._maxpool3x3_np, (grid,)),
        "greedy_match (60x60)": (kernels._greedy_match_nb, kernels._greedy_match_np, (dist, order, 2.0)),
        "linear_assignment (128x128)": (kernels._linear_assignment_nb, kernels._linear_assignment_np, (cost,)),
        "voxel_keep (5k pts, 8^3)": (kernels._voxel_keep_nb, kernels._voxel_keep_np, (unit, 8, 2, perm)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAS_NUMBA:
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (nb, npy, a) in cases(rng).items():
        ref = npy(*a)
        got = nb(*a)  # compile
        assert np.array_equal(np.asarray(ref), np.asarray(got)), name
        t_nb = min(timeit.repeat(lambda: nb(*a), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: npy(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {t_nb:10.2f} {t_np:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
