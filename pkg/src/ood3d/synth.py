"""Synthetic scenes with known and unknown objects, fabricated BEV feature maps
and an emulated detector of controllable fidelity.

The backbone (class mean embeddings, geometry projection, mesh prototypes) is
seeded by ``backbone_seed`` so separate worlds can share one "trained
detector" while their scenes differ through ``rng_seed``.
"""
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import StrEnum
from .errors import ConfigError, ParseError
from .model import Box3D, Detection, FeatureMap, GroundTruthObject, PointCloud, Scan
from .parallel import pmap
from .probe import ProbeConfig, probe
from .scan_io import DatasetManifest, save_manifest, save_scan

WORLD_FILE = "world.json"
MAP_MARGIN = 4.0
GROUND_POINTS = 200


class MapStorage(StrEnum):
    BOTH = "both"
    LOW = "low"
    NONE = "none"


@dataclass(frozen=True)
class ClassSpec:
    name: str
    is_open: bool
    size_mean: Tuple[float, float, float]
    size_std: Tuple[float, float, float]
    # relative frequency within its partition
    weight: float = 1.0
    points: Tuple[int, int] = (20, 100)

    def __post_init__(self):
        object.__setattr__(self, "size_mean", tuple(float(v) for v in self.size_mean))
        object.__setattr__(self, "size_std", tuple(float(v) for v in self.size_std))
        object.__setattr__(self, "points", tuple(int(v) for v in self.points))
        if min(self.size_mean) <= 0 or min(self.size_std) < 0 or self.weight <= 0:
            raise ConfigError(f"class {self.name}: size and weight priors must be positive")
        if not 1 <= self.points[0] <= self.points[1]:
            raise ConfigError(f"class {self.name}: bad points-per-object range {self.points}")


DEFAULT_CLASSES = (
    ClassSpec("Car", False, (4.5, 1.9, 1.6), (0.4, 0.15, 0.15), 0.6, (80, 300)),
    ClassSpec("Pedestrian", False, (0.8, 0.7, 1.75), (0.15, 0.1, 0.1), 0.25, (20, 80)),
    ClassSpec("Cyclist", False, (1.8, 0.7, 1.7), (0.2, 0.1, 0.1), 0.15, (30, 120)),
    ClassSpec("Stroller", True, (1.0, 0.6, 1.1), (0.15, 0.1, 0.1), 1.0, (15, 70)),
)


@dataclass(frozen=True)
class WorldConfig:
    n_scans: int = 200
    open_scan_fraction: float = 0.75
    classes: Tuple[ClassSpec, ...] = DEFAULT_CLASSES
    known_per_scan: Tuple[int, int] = (5, 20)
    open_per_scan: Tuple[int, int] = (1, 4)
    extent: float = 100.0
    cell_size: float = 1.4
    feature_dim_low: int = 192
    feature_dim_high: int = 512
    feature_maps: MapStorage = MapStorage.BOTH
    intensity_stats: Tuple[float, float] = (0.3, 0.1)
    rng_seed: int = 0
    backbone_seed: int = 0
    name: str = "synth"

    def __post_init__(self):
        object.__setattr__(self, "feature_maps", MapStorage.parse(self.feature_maps))
        object.__setattr__(self, "classes", tuple(c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes))
        if self.n_scans < 0:
            raise ConfigError("n_scans must be >= 0")
        if not 0.0 <= self.open_scan_fraction <= 1.0:
            raise ConfigError("open_scan_fraction must lie in [0, 1]")
        if not self.extent > 2 * MAP_MARGIN + 1 or not self.cell_size > 0:
            raise ConfigError("extent and cell_size must be positive (extent > 9 m)")
        if not self.known_classes or not self.open_classes:
            raise ConfigError("need at least one known and one open class")
        for lo, hi in (self.known_per_scan, self.open_per_scan):
            if not 0 <= lo <= hi:
                raise ConfigError("object count ranges must be ordered and non-negative")
        needed = len(self.classes) + 1
        if min(self.feature_dim_low, self.feature_dim_high) < needed:
            raise ConfigError(f"feature dims must be >= {needed} to keep class means orthogonal")
        if not self.intensity_stats[1] > 0:
            raise ConfigError("intensity std must be positive")

    @property
    def known_classes(self) -> Tuple[ClassSpec, ...]:
        return tuple(c for c in self.classes if not c.is_open)

    @property
    def open_classes(self) -> Tuple[ClassSpec, ...]:
        return tuple(c for c in self.classes if c.is_open)

    @property
    def grid_cells(self) -> int:
        return int(math.ceil(self.extent / self.cell_size))

    @property
    def map_origin(self) -> Tuple[float, float]:
        o = -0.5 * self.extent + 0.5 * self.cell_size
        return o, o


@dataclass(frozen=True)
class DetectorEmulation:
    miss_rate_known: float = 0.1
    miss_rate_open: float = 0.3
    center_jitter_std: float = 0.25
    size_noise: float = 0.05
    yaw_noise: float = 0.05
    # Beta(a, b) detector-score priors per outcome
    score_known: Tuple[float, float] = (5.0, 2.0)
    score_open: Tuple[float, float] = (2.5, 3.0)
    score_clutter: Tuple[float, float] = (1.5, 6.0)
    # logit model: the true class sits logit_gap above the rest; open objects
    # raise two classes by open_logit_share * logit_gap each
    logit_gap: float = 3.0
    open_logit_share: float = 0.6
    logit_noise: float = 1.0
    logit_noise_open: float = 1.0
    mc_samples: int = 0
    mc_noise: float = 0.3
    mc_noise_open: float = 0.8
    # embedding model, in units of the per-coordinate instance noise
    embed_noise: float = 1.0
    class_separation: float = 4.0
    open_shift: float = 3.0
    geometry_scale: float = 0.3
    cell_noise: float = 0.3
    background_weight: float = 0.05
    clutter_rate: float = 2.0
    clutter_min_dist: float = 4.0
    # write ood_score = 1 for detections of unknown objects, 0 otherwise
    oracle_ood: bool = False

    def __post_init__(self):
        for name in ("miss_rate_known", "miss_rate_open", "open_logit_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("center_jitter_std", "size_noise", "yaw_noise", "logit_noise", "logit_noise_open", "mc_noise",
                     "mc_noise_open", "embed_noise", "cell_noise", "clutter_rate", "background_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("score_known", "score_open", "score_clutter"):
            if min(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} Beta parameters must be positive")
        if self.mc_samples == 1 or self.mc_samples < 0:
            raise ConfigError("mc_samples must be 0 or >= 2")


# ---------------------------------------------------------------------------
# world echo
# ---------------------------------------------------------------------------


def world_to_doc(world: WorldConfig, emulation: DetectorEmulation) -> dict:
    w = asdict(world)
    w["feature_maps"] = world.feature_maps.value
    return {"world": w, "emulation": asdict(emulation)}


def _tuples(cls, doc):
    out = {}
    names = {f for f in cls.__dataclass_fields__}
    for k, v in doc.items():
        if k not in names:
            raise ConfigError(f"{cls.__name__}: unknown key {k!r}")
        out[k] = tuple(v) if isinstance(v, list) and k != "classes" else v
    return out


def world_from_doc(doc: dict) -> Tuple[WorldConfig, DetectorEmulation]:
    w = dict(doc.get("world", {}))
    if "classes" in w:
        w["classes"] = tuple(ClassSpec(**_tuples(ClassSpec, c)) for c in w["classes"])
    try:
        return WorldConfig(**_tuples(WorldConfig, w)), DetectorEmulation(**_tuples(DetectorEmulation, doc.get("emulation", {})))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_world(path) -> Tuple[WorldConfig, DetectorEmulation]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: world config must be a JSON object")
    return world_from_doc(doc)


def save_world(world: WorldConfig, emulation: DetectorEmulation, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(world_to_doc(world, emulation), indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


def _orthonormal(rng, dim, k):
    q, _ = np.linalg.qr(rng.standard_normal((dim, k)))
    return q.T


def _stable_hash(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


@dataclass
class _Space:
    """Embedding geometry for one feature-map width."""

    dim: int
    means: np.ndarray  # (n_classes, dim), manifest class order
    known_basis: np.ndarray  # (n_known, dim)
    geometry: np.ndarray  # (dim, 3)
    background: np.ndarray
    prototypes: dict = field(default_factory=dict)


class WorldModel:
    """Frozen "detector" shared by every scan of a world and by forged re-renders."""

    def __init__(self, world: WorldConfig, emulation: DetectorEmulation = DetectorEmulation()):
        self.world = world
        self.emulation = emulation
        self.manifest = DatasetManifest(
            name=world.name,
            known_classes=tuple(c.name for c in world.known_classes),
            open_classes=tuple(c.name for c in world.open_classes),
            intensity_stats=world.intensity_stats,
        )
        self.class_specs = world.known_classes + world.open_classes
        self.num_known = len(world.known_classes)
        self.ref_dims = np.exp(np.mean([np.log(c.size_mean) for c in world.known_classes], axis=0))
        self.spaces = {
            "low": self._space(world.feature_dim_low, 0),
            "high": self._space(world.feature_dim_high, 1),
        }
        self.shapes = self._logit_shapes()

    # -- embedding model --------------------------------------------------

    def _space(self, dim, salt) -> _Space:
        em = self.emulation
        rng = np.random.default_rng([self.world.backbone_seed, 7919, salt])
        sigma = em.embed_noise
        n_known = self.num_known
        n_open = len(self.class_specs) - n_known
        basis = _orthonormal(rng, dim, n_known + n_open)
        means = np.zeros((n_known + n_open, dim))
        # known means pairwise class_separation * sigma apart
        means[:n_known] = em.class_separation * sigma / math.sqrt(2.0) * basis[:n_known]
        centroid = means[:n_known].mean(axis=0)
        # open means leave the known hull along directions orthogonal to it
        for o in range(n_open):
            means[n_known + o] = centroid + em.open_shift * sigma * basis[n_known + o]
        geometry = rng.normal(0.0, em.geometry_scale * sigma, size=(dim, 3))
        return _Space(dim, means, basis[:n_known], geometry, np.zeros(dim))

    def prototype(self, name: str, space: str) -> np.ndarray:
        """Semantic mean of an injected mesh: off the known hull in its own direction."""
        sp = self.spaces[space]
        if name not in sp.prototypes:
            rng = np.random.default_rng([self.world.backbone_seed, _stable_hash("mesh", name, sp.dim)])
            v = rng.standard_normal(sp.dim)
            v -= sp.known_basis.T @ (sp.known_basis @ v)
            v /= np.linalg.norm(v)
            centroid = sp.means[: self.num_known].mean(axis=0)
            sp.prototypes[name] = centroid + self.emulation.open_shift * self.emulation.embed_noise * v
        return sp.prototypes[name]

    def semantic(self, gt: GroundTruthObject, space: str) -> np.ndarray:
        sp = self.spaces[space]
        if gt.forged is not None and gt.forged.startswith("inject:"):
            return self.prototype(gt.forged.split(":", 1)[1], space)
        if gt.mix:
            return sum(w * sp.means[c] for c, w in gt.mix)
        return sp.means[gt.class_id]

    def object_embedding(self, scan_id: str, index: int, gt: GroundTruthObject, space: str) -> np.ndarray:
        sp = self.spaces[space]
        g = np.log(gt.box.dims / self.ref_dims)
        rng = np.random.default_rng([self.world.rng_seed, _stable_hash(scan_id), index, sp.dim])
        noise = rng.normal(0.0, self.emulation.embed_noise, size=sp.dim)
        return self.semantic(gt, space) + sp.geometry @ g + noise

    def render_map(self, scan_id: str, gts: Sequence[GroundTruthObject], space: str) -> FeatureMap:
        """Distance-weighted blend of object embeddings over the BEV grid, plus per-cell noise."""
        w = self.world
        em = self.emulation
        sp = self.spaces[space]
        n = w.grid_cells
        ox, oy = w.map_origin
        xs = ox + w.cell_size * np.arange(n)
        ys = oy + w.cell_size * np.arange(n)
        px = np.tile(xs, n)
        py = np.repeat(ys, n)
        num = np.tile(em.background_weight * sp.background, (n * n, 1))
        den = np.full(n * n, em.background_weight)
        if gts:
            emb = np.stack([self.object_embedding(scan_id, i, g, space) for i, g in enumerate(gts)])
            cx = np.array([g.box.cx for g in gts])
            cy = np.array([g.box.cy for g in gts])
            spread = np.array([0.35 * math.hypot(g.box.l, g.box.w) + 0.5 * w.cell_size for g in gts])
            d2 = (px[:, None] - cx[None, :]) ** 2 + (py[:, None] - cy[None, :]) ** 2
            weights = np.exp(-d2 / (2.0 * spread[None, :] ** 2))
            num += weights @ emb
            den += weights.sum(axis=1)
        data = num / den[:, None]
        rng = np.random.default_rng([w.rng_seed, _stable_hash(scan_id), 31, sp.dim])
        data += em.cell_noise * em.embed_noise * rng.standard_normal(data.shape)
        return FeatureMap(data.reshape(n, n, sp.dim), (ox, oy), w.cell_size)

    # -- logit model --------------------------------------------------------

    def _logit_shapes(self) -> np.ndarray:
        em = self.emulation
        c = self.num_known
        shapes = np.zeros((len(self.class_specs), c))
        for k in range(c):
            shapes[k, k] = em.logit_gap
        for o in range(len(self.class_specs) - c):
            # an unknown class resembles two known ones at once
            shapes[c + o, o % c] = em.open_logit_share * em.logit_gap
            shapes[c + o, (o + 1) % c] = em.open_logit_share * em.logit_gap
        return shapes

    def logit_shape(self, gt: GroundTruthObject) -> np.ndarray:
        if gt.forged is not None and gt.forged.startswith("inject:"):
            return np.zeros(self.num_known)
        if gt.mix:
            return sum(w * self.shapes[c] for c, w in gt.mix)
        return self.shapes[gt.class_id]


def _beta_score(rng, prior) -> float:
    return float(np.clip(rng.beta(*prior), 1e-4, 1.0 - 1e-4))


def _anchored_logits(shape, noise_std, score, rng) -> np.ndarray:
    """Class-shaped logits shifted so the max logit equals logit(score)."""
    z = shape + rng.normal(0.0, noise_std, size=shape.size) if noise_std > 0 else np.array(shape, dtype=np.float64)
    return z + (math.log(score / (1.0 - score)) - z.max())


def emulate_mc_samples(detection: Detection, emulation: DetectorEmulation, k: int, rng: np.random.Generator,
                       open_origin: bool = False) -> np.ndarray:
    """k stochastic forward passes around the detection's logits; wider for unknown objects."""
    if k < 2:
        raise ConfigError("need k >= 2 MC samples")
    std = emulation.mc_noise_open if open_origin else emulation.mc_noise
    base = np.asarray(detection.logits, dtype=np.float64)
    if std == 0:
        return np.tile(base, (k, 1))
    return base + rng.normal(0.0, std, size=(k, base.size))


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def _scene_objects(model: WorldModel, rng, has_open: bool) -> List[Tuple[int, Box3D]]:
    w = model.world
    known = w.known_classes
    kw = np.array([c.weight for c in known])
    n_known = int(rng.integers(w.known_per_scan[0], w.known_per_scan[1] + 1))
    ids = list(rng.choice(len(known), size=n_known, p=kw / kw.sum()))
    if has_open:
        opens = w.open_classes
        ow = np.array([c.weight for c in opens])
        n_open = int(rng.integers(max(w.open_per_scan[0], 1), max(w.open_per_scan[1], 1) + 1))
        ids += [model.num_known + int(k) for k in rng.choice(len(opens), size=n_open, p=ow / ow.sum())]
    half = 0.5 * w.extent - MAP_MARGIN
    placed: List[Tuple[int, Box3D, float]] = []
    for cid in ids:
        spec = model.class_specs[cid]
        dims = np.maximum(rng.normal(spec.size_mean, spec.size_std), 0.1 * np.asarray(spec.size_mean))
        r = 0.5 * math.hypot(dims[0], dims[1])
        for _ in range(200):
            x, y = rng.uniform(-half, half, size=2)
            if all(math.hypot(x - b.cx, y - b.cy) > r + rb for _, b, rb in placed):
                yaw = rng.uniform(-math.pi, math.pi)
                placed.append((cid, Box3D(x, y, 0.5 * dims[2], dims[0], dims[1], dims[2], yaw), r))
                break
    return [(cid, box) for cid, box, _ in placed]


def _object_points(model: WorldModel, rng, cid: int, box: Box3D) -> np.ndarray:
    lo, hi = model.class_specs[cid].points
    n = int(rng.integers(lo, hi + 1))
    # shrunk slightly so float32 storage cannot push a point across a face
    local = rng.uniform(-0.495, 0.495, size=(n, 3)) * box.dims
    inten = np.maximum(rng.normal(*model.world.intensity_stats, size=n), 0.0)
    return np.c_[box.to_world(local), inten]


def _origin_kind(gt: GroundTruthObject) -> str:
    if gt.forged is not None:
        return "forged"
    return "open" if gt.is_open else "known"


def emulate_detections(model: WorldModel, scan_id: str, gts: Sequence[GroundTruthObject], low_map: Optional[FeatureMap],
                       rng: np.random.Generator) -> Tuple[Detection, ...]:
    em = model.emulation
    w = model.world
    dets = []
    for gt in gts:
        kind = _origin_kind(gt)
        unknown = kind != "known"
        miss = em.miss_rate_open if unknown else em.miss_rate_known
        if rng.random() < miss:
            continue
        b = gt.box
        center = b.center + rng.normal(0.0, em.center_jitter_std, size=3) if em.center_jitter_std > 0 else b.center
        dims = b.dims * np.exp(rng.normal(0.0, em.size_noise, size=3)) if em.size_noise > 0 else b.dims
        yaw = b.yaw + rng.normal(0.0, em.yaw_noise) if em.yaw_noise > 0 else b.yaw
        box = Box3D(*center, *dims, yaw)
        score = _beta_score(rng, em.score_open if unknown else em.score_known)
        logits = _anchored_logits(model.logit_shape(gt), em.logit_noise_open if unknown else em.logit_noise, score, rng)
        dets.append((box, score, logits, unknown))

    half = 0.5 * w.extent - MAP_MARGIN
    n_clutter = int(rng.poisson(em.clutter_rate)) if em.clutter_rate > 0 else 0
    known = w.known_classes
    for _ in range(n_clutter):
        for _ in range(50):
            x, y = rng.uniform(-half, half, size=2)
            if all(math.hypot(x - g.box.cx, y - g.box.cy) > em.clutter_min_dist for g in gts):
                break
        else:
            continue
        cid = int(rng.integers(len(known)))
        dims = np.asarray(known[cid].size_mean)
        box = Box3D(x, y, 0.5 * dims[2], *dims, rng.uniform(-math.pi, math.pi))
        score = _beta_score(rng, em.score_clutter)
        logits = _anchored_logits(0.5 * model.shapes[cid], em.logit_noise, score, rng)
        dets.append((box, score, logits, False))

    out = []
    for t in rng.permutation(len(dets)):
        box, score, logits, unknown = dets[int(t)]
        emb = None
        if low_map is not None:
            emb = probe(low_map, (box.cx, box.cy), ProbeConfig(interpolate=False, pool3x3=False))
        det = Detection(box, score, logits, embedding=emb, ood_score=(1.0 if unknown else 0.0) if em.oracle_ood else None)
        if em.mc_samples:
            det = replace(det, logit_samples=emulate_mc_samples(det, em, em.mc_samples, rng, unknown))
        out.append(det)
    return tuple(out)


def render_scan(model: WorldModel, scan_id: str, cloud: PointCloud, gts: Sequence[GroundTruthObject],
                det_rng: np.random.Generator) -> Scan:
    """Feature maps and emulated detections for a fixed set of objects."""
    low = model.render_map(scan_id, gts, "low")
    storage = model.world.feature_maps
    high = model.render_map(scan_id, gts, "high") if storage is MapStorage.BOTH else None
    dets = emulate_detections(model, scan_id, gts, low, det_rng)
    return Scan(scan_id, cloud, tuple(gts), dets, low if storage is not MapStorage.NONE else None, high)


def scan_id_for(index: int) -> str:
    return f"scan_{index:05d}"


def open_scan_indices(world: WorldConfig) -> np.ndarray:
    """Exactly round(fraction * n) scans carry unknown objects."""
    rng = np.random.default_rng([world.rng_seed, 101])
    n_open = int(round(world.open_scan_fraction * world.n_scans))
    return np.sort(rng.permutation(world.n_scans)[:n_open])


def simulate_scan(model: WorldModel, index: int, has_open: bool) -> Scan:
    w = model.world
    sid = scan_id_for(index)
    rng = np.random.default_rng([w.rng_seed, _stable_hash(sid), 0])
    objects = _scene_objects(model, rng, has_open)
    ground = np.c_[rng.uniform(-0.5 * w.extent, 0.5 * w.extent, size=(GROUND_POINTS, 2)), np.zeros(GROUND_POINTS),
                   np.maximum(rng.normal(*w.intensity_stats, size=GROUND_POINTS), 0.0)]
    parts = [ground]
    gts = []
    start = GROUND_POINTS
    for cid, box in objects:
        pts = _object_points(model, rng, cid, box)
        parts.append(pts)
        gts.append(GroundTruthObject(box, cid, cid >= model.num_known, np.arange(start, start + len(pts))))
        start += len(pts)
    cloud = PointCloud(np.concatenate(parts))
    det_rng = np.random.default_rng([w.rng_seed, _stable_hash(sid), 1])
    return render_scan(model, sid, cloud, gts, det_rng)


def rerender(model: WorldModel, scan: Scan, salt: int = 0) -> Scan:
    """Re-run the emulated detector on a scan whose objects were edited (forged)."""
    det_rng = np.random.default_rng([model.world.rng_seed, _stable_hash(scan.scan_id), 2, salt])
    return render_scan(model, scan.scan_id, scan.cloud, scan.ground_truth, det_rng)


def simulate_world(world: WorldConfig, emulation: DetectorEmulation = DetectorEmulation()):
    """(model, scans) generated in memory."""
    model = WorldModel(world, emulation)
    open_idx = set(open_scan_indices(world).tolist())
    scans = pmap(lambda i: simulate_scan(model, i, i in open_idx), range(world.n_scans))
    return model, scans


def generate_world(world: WorldConfig, emulation: DetectorEmulation, out_dir) -> Path:
    """Write scans, a manifest and the world echo under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    model = WorldModel(world, emulation)
    open_idx = set(open_scan_indices(world).tolist())
    rel = [f"scans/{scan_id_for(i)}.json" for i in range(world.n_scans)]

    def one(i):
        save_scan(simulate_scan(model, i, i in open_idx), out / rel[i], model.manifest, blobs=True)

    pmap(one, range(world.n_scans))
    manifest = replace(model.manifest, scan_paths=tuple(rel), root=out)
    save_world(world, emulation, out / WORLD_FILE)
    return save_manifest(manifest, out / "manifest.json")
