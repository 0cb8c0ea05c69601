"""Pseudo-unknown generators: Gaussian embedding noise, object resizing,
point-set mixup, mesh injection and top-K autolabelling."""
import math
import zlib
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import kernels
from ..config import StrEnum
from ..errors import ConfigError, NoFreeSpace, NoMemberPoints, TooFewEligible
from ..head import HeadInput, detection_inputs
from ..matcher import match_scan
from ..model import Box3D, GroundTruthObject, PointCloud, Scan, box_overlap_3d
from ..probe import ProbeConfig
from ..scan_io import DatasetManifest, RunConfig, SortMode
from .meshes import Mesh, normalize_unit, sample_surface

PLACEMENT_ATTEMPTS = 100
HUNGARIAN_LIMIT = 128


class ForgeMethod(StrEnum):
    GAUSSIAN_NOISE = "GaussianNoise"
    MESH_INJECTION = "MeshInjection"
    POINT_MIXUP = "PointMixup"
    RESIZING = "Resizing"
    TOP_K = "TopK"
    # real open-class annotations as positives; the upper-bound reference
    ORACLE = "Oracle"


@dataclass(frozen=True)
class ForgeConfig:
    method: ForgeMethod = ForgeMethod.TOP_K
    rng_seed: int = 0
    topk_k: int = 5
    mix_prob: float = 0.2
    mix_range: Tuple[float, float] = (0.3, 0.7)
    min_points: int = 5
    inject_count_range: Tuple[int, int] = (15, 25)
    surface_samples: int = 200
    grid_cells_range: Tuple[int, int] = (5, 10)
    keep_per_cell_range: Tuple[int, int] = (1, 3)
    scale_range: Tuple[float, float] = (1.0, 4.0)
    resize_axis_range: Tuple[float, float] = (0.5, 2.0)
    resize_excluded: Tuple[float, float] = (0.9, 1.1)
    resize_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "method", ForgeMethod.parse(self.method))
        for name in ("mix_range", "inject_count_range", "grid_cells_range", "keep_per_cell_range", "scale_range",
                     "resize_axis_range", "resize_excluded"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be ordered, got ({lo}, {hi})")
        for name in ("mix_prob", "resize_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.topk_k < 0 or self.min_points < 0 or self.surface_samples < 1:
            raise ConfigError("counts must be non-negative")
        if self.grid_cells_range[0] < 1 or self.keep_per_cell_range[0] < 1 or self.inject_count_range[0] < 0:
            raise ConfigError("grid cells and keep-per-cell must be >= 1")
        a, b = self.resize_axis_range
        lo, hi = self.resize_excluded
        if not (a <= lo and hi <= b and (lo - a) + (b - hi) > 0):
            raise ConfigError("resize exclusion band must leave part of the axis range")


def scan_rng(config: ForgeConfig, scan_id: str) -> np.random.Generator:
    """Per-scan stream so scans can be forged independently and in any order."""
    return np.random.default_rng([config.rng_seed, zlib.crc32(scan_id.encode())])


# ---------------------------------------------------------------------------
# embedding-space noise
# ---------------------------------------------------------------------------


def forge_gaussian(inputs: Sequence[HeadInput], config: ForgeConfig = ForgeConfig()) -> List[HeadInput]:
    """Originals followed by one N(0, 1)-perturbed copy (label 1) per known input."""
    rng = np.random.default_rng(config.rng_seed)
    kept = list(inputs)
    copies = []
    for h in inputs:
        if h.y != 0:
            continue
        x = h.x.copy()
        x[: h.embed_dim] += rng.standard_normal(h.embed_dim)
        copies.append(HeadInput(x, 1, h.embed_dim, h.provenance + ":gauss"))
    return kept + copies


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def sample_resize_factors(rng: np.random.Generator, config: ForgeConfig, n: int = 3) -> np.ndarray:
    """Uniform draws from the axis range with the exclusion band cut out."""
    a, b = config.resize_axis_range
    lo, hi = config.resize_excluded
    left = lo - a
    u = rng.uniform(0.0, left + (b - hi), size=n)
    return np.where(u < left, a + u, hi + (u - left))


def resize_object(scan: Scan, index: int, factors) -> Scan:
    """Scale one object's box and member points by per-axis factors in its local frame."""
    gt = scan.ground_truth[index]
    if gt.point_indices is None:
        raise NoMemberPoints(f"scan {scan.scan_id}: object {index} has no member points")
    f = np.asarray(factors, dtype=np.float64)
    box = gt.box
    new_box = Box3D(box.cx, box.cy, box.cz, box.l * f[0], box.w * f[1], box.h * f[2], box.yaw)
    pts = scan.cloud.points.copy()
    idx = gt.point_indices
    if idx.size:
        local = box.to_local(pts[idx, :3].astype(np.float64)) * f
        pts[idx, :3] = new_box.to_world(local)
    objs = list(scan.ground_truth)
    objs[index] = replace(gt, box=new_box, is_open=True, forged="resize")
    return replace(scan, cloud=PointCloud(pts), ground_truth=tuple(objs))


def forge_resize(scan: Scan, config: ForgeConfig = ForgeConfig(), rng: Optional[np.random.Generator] = None) -> Scan:
    """Rescale a random subset (probability ``resize_prob`` each) of known objects."""
    rng = rng if rng is not None else scan_rng(config, scan.scan_id)
    known = [i for i, g in enumerate(scan.ground_truth) if not g.is_open]
    eligible = [i for i in known if scan.ground_truth[i].point_indices is not None]
    if known and not eligible:
        raise NoMemberPoints(f"scan {scan.scan_id}: no known object carries member points")
    for i in eligible:
        if rng.random() < config.resize_prob:
            scan = resize_object(scan, i, sample_resize_factors(rng, config))
    return scan


# ---------------------------------------------------------------------------
# point mixup
# ---------------------------------------------------------------------------


def match_point_sets(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sigma with a[i] <-> b[sigma[i]] minimising total squared distance.

    Exact (Hungarian) up to HUNGARIAN_LIMIT points, greedy nearest neighbour
    above that.
    """
    n = len(a)
    cost = ((a[:, None, :3] - b[None, :, :3]) ** 2).sum(axis=2)
    if n <= HUNGARIAN_LIMIT:
        return kernels.linear_assignment(np.ascontiguousarray(cost))
    sigma = np.empty(n, dtype=np.int64)
    free = np.ones(n, dtype=bool)
    for i in range(n):
        row = np.where(free, cost[i], np.inf)
        j = int(np.argmin(row))
        sigma[i] = j
        free[j] = False
    return sigma


def mix_point_sets(a: np.ndarray, b: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Interpolate two (n, k) point sets whose first three columns are xyz."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = min(len(a), len(b))
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), n, replace=False))]
    sigma = match_point_sets(a, b)
    return (1.0 - lam) * a + lam * b[sigma]


def _rebuild(scan: Scan, objects: List[Tuple[GroundTruthObject, Optional[np.ndarray]]]) -> Scan:
    """Reassemble the cloud from background points plus each object's own points."""
    pts = scan.cloud.points
    owned = np.zeros(len(pts), dtype=bool)
    for g in scan.ground_truth:
        if g.point_indices is not None:
            owned[g.point_indices] = True
    parts = [pts[~owned]]
    start = parts[0].shape[0]
    gts = []
    for gt, obj_pts in objects:
        if obj_pts is None:
            gts.append(replace(gt, point_indices=None))
            continue
        obj_pts = np.asarray(obj_pts, dtype=np.float32).reshape(-1, 4)
        parts.append(obj_pts)
        gts.append(replace(gt, point_indices=np.arange(start, start + len(obj_pts))))
        start += len(obj_pts)
    cloud = PointCloud(np.concatenate(parts) if parts else np.zeros((0, 4), np.float32))
    return replace(scan, cloud=cloud, ground_truth=tuple(gts))


def forge_pointmixup(
    scan: Scan, config: ForgeConfig = ForgeConfig(), rng: Optional[np.random.Generator] = None, lam: Optional[float] = None
) -> Scan:
    """Replace objects by interpolations with a random partner (``lam`` forces the factor)."""
    rng = rng if rng is not None else scan_rng(config, scan.scan_id)
    gts = scan.ground_truth
    pts = scan.cloud.points
    eligible = [
        i for i, g in enumerate(gts)
        if g.point_indices is not None and g.point_indices.size >= config.min_points and g.forged is None
    ]
    if len(eligible) < 2:
        raise TooFewEligible(f"scan {scan.scan_id}: {len(eligible)} objects with >= {config.min_points} points")

    def local(i):
        g = gts[i]
        p = pts[g.point_indices].astype(np.float64)
        p[:, :3] = g.box.to_local(p[:, :3])
        return p

    objects = [(g, None if g.point_indices is None else pts[g.point_indices]) for g in gts]
    for i in eligible:
        if rng.random() >= config.mix_prob:
            continue
        others = [j for j in eligible if j != i]
        j = others[int(rng.integers(len(others)))]
        w = float(rng.uniform(*config.mix_range)) if lam is None else float(lam)
        mixed = mix_point_sets(local(i), local(j), w, rng)
        gi, gj = gts[i], gts[j]
        dims = (1.0 - w) * gi.box.dims + w * gj.box.dims
        box = Box3D(gi.box.cx, gi.box.cy, gi.box.cz, *dims, gi.box.yaw)
        mixed[:, :3] = box.to_world(mixed[:, :3])
        mixed[:, 3] = np.maximum(mixed[:, 3], 0.0)
        new_gt = replace(gi, box=box, is_open=True, forged="mixup", mix=((gi.class_id, 1.0 - w), (gj.class_id, w)))
        objects[i] = (new_gt, mixed)
    return _rebuild(scan, objects)


# ---------------------------------------------------------------------------
# mesh injection
# ---------------------------------------------------------------------------


def grid_sample(unit_xyz: np.ndarray, cells: int, keep: int, rng: np.random.Generator) -> np.ndarray:
    """Indices kept after allowing at most ``keep`` random points per voxel."""
    mask = kernels.voxel_keep(np.ascontiguousarray(unit_xyz, dtype=np.float64), int(cells), int(keep),
                              rng.permutation(len(unit_xyz)).astype(np.int64))
    return np.flatnonzero(mask)


def scan_bounds(scan: Scan, default_extent: float = 100.0):
    """(xmin, xmax, ymin, ymax) of the scene area."""
    fmap = scan.feature_map_low or scan.feature_map_high
    if fmap is not None:
        half = 0.5 * fmap.cell_size
        x0, y0 = fmap.origin
        return x0 - half, x0 - half + fmap.extent[0], y0 - half, y0 - half + fmap.extent[1]
    if len(scan.cloud):
        xyz = scan.cloud.xyz
        return float(xyz[:, 0].min()), float(xyz[:, 0].max()), float(xyz[:, 1].min()), float(xyz[:, 1].max())
    h = 0.5 * default_extent
    return -h, h, -h, h


def _place(rng, dims, bounds, occupied: List[Box3D]) -> Box3D:
    xmin, xmax, ymin, ymax = bounds
    r = 0.5 * math.hypot(dims[0], dims[1])
    if xmax - xmin < 2 * r or ymax - ymin < 2 * r:
        raise NoFreeSpace("object does not fit inside the scene")
    for _ in range(PLACEMENT_ATTEMPTS):
        box = Box3D(
            rng.uniform(xmin + r, xmax - r), rng.uniform(ymin + r, ymax - r), 0.5 * dims[2],
            dims[0], dims[1], dims[2], rng.uniform(-math.pi, math.pi),
        )
        if all(box_overlap_3d(box, o) == 0.0 for o in occupied):
            return box
    raise NoFreeSpace(f"no collision-free pose after {PLACEMENT_ATTEMPTS} attempts")


def inject_object(mesh: Mesh, name: str, manifest: DatasetManifest, config: ForgeConfig, rng, bounds, occupied):
    """Sampled points (k, 4) and the unknown GT box for one inserted mesh."""
    unit = normalize_unit(mesh)
    surf = sample_surface(unit, config.surface_samples, rng)
    cells = int(rng.integers(config.grid_cells_range[0], config.grid_cells_range[1] + 1))
    keep = int(rng.integers(config.keep_per_cell_range[0], config.keep_per_cell_range[1] + 1))
    surf = surf[grid_sample(surf, cells, keep, rng)]
    mean, std = manifest.intensity_stats
    intensity = np.maximum(rng.normal(mean, std, size=len(surf)), 0.0)
    s = float(rng.uniform(*config.scale_range))
    dims = np.maximum(unit.extents, 1e-3) * s
    box = _place(rng, dims, bounds, occupied)
    world = box.to_world(surf * s)
    gt = GroundTruthObject(box, -1, True, forged=f"inject:{name}")
    return np.c_[world, intensity], gt


def forge_inject(
    scan: Scan,
    mesh_bank: Dict[str, Mesh],
    manifest: DatasetManifest,
    config: ForgeConfig = ForgeConfig(),
    rng: Optional[np.random.Generator] = None,
) -> Scan:
    """Insert N ~ U(inject_count_range) sampled meshes as unknown objects."""
    if not mesh_bank:
        raise ConfigError("mesh bank is empty")
    rng = rng if rng is not None else scan_rng(config, scan.scan_id)
    names = sorted(mesh_bank)
    bounds = scan_bounds(scan)
    occupied = [g.box for g in scan.ground_truth]
    n = int(rng.integers(config.inject_count_range[0], config.inject_count_range[1] + 1))
    base = len(scan.cloud)
    clouds = [scan.cloud.points]
    gts = list(scan.ground_truth)
    for _ in range(n):
        name = names[int(rng.integers(len(names)))]
        pts, gt = inject_object(mesh_bank[name], name, manifest, config, rng, bounds, occupied)
        occupied.append(gt.box)
        gts.append(replace(gt, point_indices=np.arange(base, base + len(pts))))
        clouds.append(pts.astype(np.float32))
        base += len(pts)
    return replace(scan, cloud=PointCloud(np.concatenate(clouds)), ground_truth=tuple(gts))


# ---------------------------------------------------------------------------
# top-K autolabelling
# ---------------------------------------------------------------------------


def topk_indices(scan: Scan, k: int) -> List[int]:
    """The k most confident detections overlapping no known GT box (ties: lower index)."""
    known = [g.box for g in scan.ground_truth if not g.is_open]
    order = sorted(range(len(scan.detections)), key=lambda i: (-scan.detections[i].score, i))
    picked = []
    for i in order:
        if len(picked) == k:
            break
        box = scan.detections[i].box
        if all(box_overlap_3d(box, g) == 0.0 for g in known):
            picked.append(i)
    return picked


def forge_topk(
    scan: Scan,
    config: ForgeConfig = ForgeConfig(),
    run_config: RunConfig = RunConfig(),
    probe_config: Optional[ProbeConfig] = None,
) -> List[HeadInput]:
    """Label-1 inputs for the top-K pseudo-unknowns, label-0 for detections matched to known GT."""
    unknown = topk_indices(scan, config.topk_k)
    taken = set(unknown)
    report = match_scan(scan, replace(run_config, sort_mode=SortMode.DETECTOR_SCORE), with_scores=False)
    known = sorted(i for i, j, _ in report.pairs if not scan.ground_truth[j].is_open and i not in taken)
    idx = known + unknown
    labels = [0] * len(known) + [1] * len(unknown)
    return detection_inputs(scan, idx, labels, probe_config, provenance=f"{scan.scan_id}:topk")
