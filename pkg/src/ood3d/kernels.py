"""Hot inner loops, each in a numba flavour and a vectorised numpy flavour.

The public names at the bottom of the module are bound to one flavour at
import time (see :mod:`ood3d._accel`). Both flavours are importable directly so
tests and ``benchmarks/bench_kernels.py`` can compare them.
"""
import numpy as np

from ._accel import njit, pick

# ---------------------------------------------------------------------------
# points inside a yaw-rotated box (boundary inclusive)
# ---------------------------------------------------------------------------


@njit
def _points_in_box_nb(xyz, cx, cy, cz, l, w, h, yaw):
    n = xyz.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    c = np.cos(yaw)
    s = np.sin(yaw)
    hl = 0.5 * l
    hw = 0.5 * w
    hh = 0.5 * h
    for i in range(n):
        dx = xyz[i, 0] - cx
        dy = xyz[i, 1] - cy
        dz = xyz[i, 2] - cz
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        out[i] = abs(lx) <= hl and abs(ly) <= hw and abs(dz) <= hh
    return out


def _points_in_box_np(xyz, cx, cy, cz, l, w, h, yaw):
    c = np.cos(yaw)
    s = np.sin(yaw)
    dx = xyz[:, 0] - cx
    dy = xyz[:, 1] - cy
    dz = xyz[:, 2] - cz
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= 0.5 * l) & (np.abs(ly) <= 0.5 * w) & (np.abs(dz) <= 0.5 * h)


# ---------------------------------------------------------------------------
# 3x3 max pooling, stride 1, replicate padding, per channel
# ---------------------------------------------------------------------------


@njit
def _maxpool3x3_nb(grid):
    rows, cols, dim = grid.shape
    out = np.empty_like(grid)
    for r in range(rows):
        for c in range(cols):
            for k in range(dim):
                best = grid[r, c, k]
                for dr in range(-1, 2):
                    rr = min(max(r + dr, 0), rows - 1)
                    for dc in range(-1, 2):
                        cc = min(max(c + dc, 0), cols - 1)
                        v = grid[rr, cc, k]
                        if v > best:
                            best = v
                out[r, c, k] = best
    return out


def _maxpool3x3_np(grid):
    rows, cols = grid.shape[:2]
    padded = np.pad(grid, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = grid.copy()
    for dr in range(3):
        for dc in range(3):
            np.maximum(out, padded[dr:dr + rows, dc:dc + cols], out=out)
    return out


# ---------------------------------------------------------------------------
# greedy confidence-ordered matching with a distance gate
# ---------------------------------------------------------------------------


@njit
def _greedy_match_nb(dist, order, d_thresh):
    m, n = dist.shape
    det_to_gt = np.full(m, -1, dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    n_taken = 0
    for t in range(order.shape[0]):
        if n_taken == n:
            break
        i = order[t]
        best = -1
        best_d = np.inf
        for j in range(n):
            if not taken[j] and dist[i, j] < best_d:
                best_d = dist[i, j]
                best = j
        if best >= 0 and best_d < d_thresh:
            det_to_gt[i] = best
            taken[best] = True
            n_taken += 1
    return det_to_gt


def _greedy_match_np(dist, order, d_thresh):
    m, n = dist.shape
    det_to_gt = np.full(m, -1, dtype=np.int64)
    work = np.array(dist, dtype=np.float64, copy=True)
    n_taken = 0
    for i in order:
        if n_taken == n:
            break
        j = int(np.argmin(work[i]))
        if work[i, j] < d_thresh:
            det_to_gt[i] = j
            work[:, j] = np.inf
            n_taken += 1
    return det_to_gt


# ---------------------------------------------------------------------------
# minimum-cost perfect assignment on a square matrix (shortest augmenting
# path form of the Hungarian method, O(n^3))
# ---------------------------------------------------------------------------


@njit
def _linear_assignment_nb(cost):
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col


def _linear_assignment_np(cost):
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free[1:] & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col


# ---------------------------------------------------------------------------
# voxel grid sampling: keep at most k points per occupied voxel
# ---------------------------------------------------------------------------


@njit
def _voxel_keep_nb(unit_xyz, cells, k, order):
    n = unit_xyz.shape[0]
    counts = np.zeros(cells * cells * cells, dtype=np.int64)
    keep = np.zeros(n, dtype=np.bool_)
    for t in range(order.shape[0]):
        i = order[t]
        ix = min(max(int(np.floor((unit_xyz[i, 0] + 0.5) * cells)), 0), cells - 1)
        iy = min(max(int(np.floor((unit_xyz[i, 1] + 0.5) * cells)), 0), cells - 1)
        iz = min(max(int(np.floor((unit_xyz[i, 2] + 0.5) * cells)), 0), cells - 1)
        key = (ix * cells + iy) * cells + iz
        if counts[key] < k:
            counts[key] += 1
            keep[i] = True
    return keep


def voxel_ids(unit_xyz, cells):
    """Flat voxel index of each point of an object normalised into [-0.5, 0.5]^3."""
    idx = np.clip(np.floor((np.asarray(unit_xyz) + 0.5) * cells).astype(np.int64), 0, cells - 1)
    return (idx[:, 0] * cells + idx[:, 1]) * cells + idx[:, 2]


def _voxel_keep_np(unit_xyz, cells, k, order):
    keys = voxel_ids(unit_xyz, cells)[order]
    # rank of each point within its voxel, in visiting order
    srt = np.argsort(keys, kind="stable")
    sk = keys[srt]
    starts = np.r_[0, np.flatnonzero(np.diff(sk)) + 1]
    group_start = np.repeat(starts, np.diff(np.r_[starts, sk.size]))
    rank = np.empty(sk.size, dtype=np.int64)
    rank[srt] = np.arange(sk.size) - group_start
    keep = np.zeros(unit_xyz.shape[0], dtype=bool)
    keep[order[rank < k]] = True
    return keep


points_in_box_mask = pick(_points_in_box_nb, _points_in_box_np)
maxpool3x3 = pick(_maxpool3x3_nb, _maxpool3x3_np)
greedy_match = pick(_greedy_match_nb, _greedy_match_np)
linear_assignment = pick(_linear_assignment_nb, _linear_assignment_np)
voxel_keep = pick(_voxel_keep_nb, _voxel_keep_np)
