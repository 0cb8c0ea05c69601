"""Shared domain types and box geometry.

All types are immutable once built: numpy members are flagged read-only, and
changes go through :func:`dataclasses.replace`.
"""
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import SchemaError

TWO_PI = 2.0 * math.pi


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into [-pi, pi); values already in range are returned untouched."""
    yaw = float(yaw)
    if -math.pi <= yaw < math.pi:
        return yaw
    out = (yaw + math.pi) % TWO_PI - math.pi
    if out >= math.pi:
        out -= TWO_PI
    return out


def _frozen_array(values, dtype, ndim=None, name="array"):
    arr = np.array(values, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise SchemaError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _same(a, b):
    if a is None or b is None:
        return a is None and b is None
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a = np.asarray(a)
        b = np.asarray(b)
        return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
    if isinstance(a, (tuple, list)) and isinstance(b, (tuple, list)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


class _ValueEq:
    """Field-wise equality that understands numpy members."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(_same(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    __hash__ = None


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        vals = [float(getattr(self, f.name)) for f in fields(self)]
        if not all(math.isfinite(v) for v in vals):
            raise SchemaError(f"box has non-finite values: {vals}")
        if min(vals[3:6]) <= 0:
            raise SchemaError(f"box dimensions must be positive, got l={vals[3]} w={vals[4]} h={vals[5]}")
        for f, v in zip(fields(self), vals):
            object.__setattr__(self, f.name, v)
        object.__setattr__(self, "yaw", normalize_yaw(vals[6]))

    @classmethod
    def from_array(cls, values) -> "Box3D":
        if len(values) != 7:
            raise SchemaError(f"box needs 7 values (cx, cy, cz, l, w, h, yaw), got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def bev_corners(self) -> np.ndarray:
        """Four BEV corners, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def to_local(self, xyz) -> np.ndarray:
        """World points -> box frame (origin at center, x along heading)."""
        xyz = np.asarray(xyz, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = xyz - self.center
        out = np.empty_like(d)
        out[:, 0] = c * d[:, 0] + s * d[:, 1]
        out[:, 1] = -s * d[:, 0] + c * d[:, 1]
        out[:, 2] = d[:, 2]
        return out

    def to_world(self, local) -> np.ndarray:
        local = np.asarray(local, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(local)
        out[:, 0] = c * local[:, 0] - s * local[:, 1] + self.cx
        out[:, 1] = s * local[:, 0] + c * local[:, 1] + self.cy
        out[:, 2] = local[:, 2] + self.cz
        return out


@dataclass(frozen=True, eq=False)
class Detection(_ValueEq):
    """One predicted box. ``ood_score`` is higher for more-unknown objects."""

    box: Box3D
    score: float
    logits: np.ndarray
    predicted_class: Optional[int] = None
    embedding: Optional[np.ndarray] = None
    ood_score: Optional[float] = None
    logit_samples: Optional[np.ndarray] = None

    def __post_init__(self):
        score = float(self.score)
        if not (0.0 <= score <= 1.0):
            raise SchemaError(f"detector score must lie in [0, 1], got {score}")
        object.__setattr__(self, "score", score)
        logits = _frozen_array(self.logits, np.float64, 1, "logits")
        if logits.size == 0:
            raise SchemaError("detection has no logits")
        if not np.all(np.isfinite(logits)):
            raise SchemaError("logits must be finite")
        object.__setattr__(self, "logits", logits)
        argmax = int(np.argmax(logits))
        if self.predicted_class is None:
            object.__setattr__(self, "predicted_class", argmax)
        elif int(self.predicted_class) != argmax:
            raise SchemaError(
                f"predicted_class {self.predicted_class} disagrees with logits argmax {argmax}"
            )
        else:
            object.__setattr__(self, "predicted_class", int(self.predicted_class))
        if self.embedding is not None:
            object.__setattr__(self, "embedding", _frozen_array(self.embedding, np.float32, 1, "embedding"))
        if self.ood_score is not None:
            ood = float(self.ood_score)
            if not math.isfinite(ood):
                raise SchemaError("ood_score must be finite")
            object.__setattr__(self, "ood_score", ood)
        if self.logit_samples is not None:
            samples = _frozen_array(self.logit_samples, np.float64, 2, "logit_samples")
            if samples.shape[1] != logits.size:
                raise SchemaError(
                    f"logit samples have width {samples.shape[1]}, logits have {logits.size}"
                )
            object.__setattr__(self, "logit_samples", samples)

    @property
    def num_classes(self) -> int:
        return self.logits.size


@dataclass(frozen=True, eq=False)
class GroundTruthObject(_ValueEq):
    """Annotated (or forged) object.

    ``forged`` names the generator that produced the object ("resize",
    "mixup", "inject:<mesh>"); forged objects are unknown by definition.
    ``mix`` lists (class_id, weight) pairs for blended objects. Injected
    objects use ``class_id = -1``.
    """

    box: Box3D
    class_id: int
    is_open: bool
    point_indices: Optional[np.ndarray] = None
    forged: Optional[str] = None
    mix: Tuple[Tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "is_open", bool(self.is_open))
        if self.point_indices is not None:
            object.__setattr__(
                self, "point_indices", _frozen_array(self.point_indices, np.int64, 1, "point_indices")
            )
        object.__setattr__(self, "mix", tuple((int(c), float(w)) for c, w in self.mix))
        if self.forged is not None and not self.is_open:
            raise SchemaError("forged objects must be flagged unknown")


@dataclass(frozen=True, eq=False)
class PointCloud(_ValueEq):
    """(n, 4) float32 array of x, y, z, intensity."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float32, copy=True).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise SchemaError("point cloud has non-finite coordinates")
        if pts.size and pts[:, 3].min() < 0:
            raise SchemaError("point intensity must be non-negative")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True, eq=False)
class FeatureMap(_ValueEq):
    """BEV grid of feature vectors; cell (r, c) is centred at origin + cell_size * (c, r)."""

    data: np.ndarray
    origin: Tuple[float, float]
    cell_size: float

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) <= 0:
            raise SchemaError(f"feature map data must be rows x cols x dim, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise SchemaError("feature map contains non-finite values")
        if not float(self.cell_size) > 0:
            raise SchemaError("cell_size must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def extent(self) -> Tuple[float, float]:
        """(x_extent, y_extent) in meters covered by the grid."""
        return self.cols * self.cell_size, self.rows * self.cell_size


@dataclass(frozen=True, eq=False)
class Scan(_ValueEq):
    scan_id: str
    cloud: PointCloud = field(default_factory=PointCloud)
    ground_truth: Tuple[GroundTruthObject, ...] = ()
    detections: Tuple[Detection, ...] = ()
    feature_map_low: Optional[FeatureMap] = None
    feature_map_high: Optional[FeatureMap] = None

    def __post_init__(self):
        object.__setattr__(self, "scan_id", str(self.scan_id))
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        object.__setattr__(self, "detections", tuple(self.detections))
        n = len(self.cloud)
        for gt in self.ground_truth:
            idx = gt.point_indices
            if idx is not None and idx.size and (idx.min() < 0 or idx.max() >= n):
                raise SchemaError(f"scan {self.scan_id}: point index out of range")

    @property
    def has_open_objects(self) -> bool:
        return any(g.is_open for g in self.ground_truth)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def center_distance(a: Box3D, b: Box3D, bev: bool = False) -> float:
    dx = a.cx - b.cx
    dy = a.cy - b.cy
    if bev:
        return math.hypot(dx, dy)
    return math.sqrt(dx * dx + dy * dy + (a.cz - b.cz) ** 2)


def center_distance_matrix(dets: Sequence[Box3D], gts: Sequence[Box3D], bev: bool = False) -> np.ndarray:
    cols = 2 if bev else 3
    p = np.array([[b.cx, b.cy, b.cz][:cols] for b in dets], dtype=np.float64).reshape(-1, cols)
    g = np.array([[b.cx, b.cy, b.cz][:cols] for b in gts], dtype=np.float64).reshape(-1, cols)
    return np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))


def _clip(poly, a, b):
    """Keep the part of convex ``poly`` on the left of directed edge a->b."""
    out = []
    ax, ay = a
    ex, ey = b[0] - ax, b[1] - ay
    n = len(poly)
    for i in range(n):
        p = poly[i]
        q = poly[(i + 1) % n]
        sp = ex * (p[1] - ay) - ey * (p[0] - ax)
        sq = ex * (q[1] - ay) - ey * (q[0] - ax)
        if sp >= 0:
            out.append(p)
        if (sp >= 0) != (sq >= 0):
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _polygon_area(poly) -> float:
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return 0.5 * abs(area)


def bev_overlap_area(a: Box3D, b: Box3D) -> float:
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    poly = [tuple(p) for p in a.bev_corners()]
    cb = [tuple(p) for p in b.bev_corners()]
    for i in range(4):
        poly = _clip(poly, cb[i], cb[(i + 1) % 4])
        if len(poly) < 3:
            return 0.0
    return _polygon_area(poly)


def box_overlap_3d(a: Box3D, b: Box3D) -> float:
    """Exact intersection volume of two upright, yaw-rotated boxes."""
    dz = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h) - max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    if dz <= 0:
        return 0.0
    area = bev_overlap_area(a, b)
    if area <= 0:
        return 0.0
    # clipping round-off must not push the self-overlap above the true volume
    return min(area * dz, a.volume, b.volume)


def points_in_box(cloud, box: Box3D) -> np.ndarray:
    """Indices of points inside ``box`` (faces count as inside)."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)[:, :3]
    if xyz.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    mask = kernels.points_in_box_mask(
        np.ascontiguousarray(xyz, dtype=np.float64), box.cx, box.cy, box.cz, box.l, box.w, box.h, box.yaw
    )
    return np.flatnonzero(mask)
