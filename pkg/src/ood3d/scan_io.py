"""On-disk dataset contract: scan JSON documents, float32 sidecar blobs,
dataset manifests and run configurations.

Bulky arrays (points, embeddings, feature maps) are float32 in memory, so a
blob-backed save is still bit-exact on reload. Scalars and logits are float64
and serialised with Python's shortest round-trip ``repr``.
"""
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .config import StrEnum, from_mapping, read_kv_file
from .errors import ConfigError, ParseError, SchemaError
from .model import Box3D, Detection, FeatureMap, GroundTruthObject, PointCloud, Scan
from .parallel import pmap

BLOB_MAGIC = b"O3DB"


# ---------------------------------------------------------------------------
# manifest / run config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    known_classes: Tuple[str, ...]
    open_classes: Tuple[str, ...]
    scan_paths: Tuple[str, ...] = ()
    intensity_stats: Tuple[float, float] = (0.0, 1.0)
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "known_classes", tuple(self.known_classes))
        object.__setattr__(self, "open_classes", tuple(self.open_classes))
        object.__setattr__(self, "scan_paths", tuple(str(p) for p in self.scan_paths))
        object.__setattr__(self, "intensity_stats", tuple(float(v) for v in self.intensity_stats))
        object.__setattr__(self, "root", Path(self.root))
        if not self.known_classes or not self.open_classes:
            raise SchemaError("manifest needs non-empty known and open class lists")
        overlap = set(self.known_classes) & set(self.open_classes)
        if overlap:
            raise SchemaError(f"classes in both partitions: {sorted(overlap)}")
        if len(set(self.class_names)) != len(self.class_names):
            raise SchemaError("duplicate class names in manifest")
        if not self.intensity_stats[1] > 0:
            raise SchemaError("intensity std must be positive")

    @property
    def class_names(self) -> Tuple[str, ...]:
        return self.known_classes + self.open_classes

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown class name {name!r}") from None

    def is_open_class(self, class_id: int) -> bool:
        return class_id >= self.num_known

    def resolve(self, scan_path) -> Path:
        p = Path(scan_path)
        return p if p.is_absolute() else self.root / p

    def scan_files(self):
        return [self.resolve(p) for p in self.scan_paths]


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    doc = {
        "name": manifest.name,
        "known_classes": list(manifest.known_classes),
        "open_classes": list(manifest.open_classes),
        "scan_paths": list(manifest.scan_paths),
        "intensity_stats": list(manifest.intensity_stats),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = _read_json(path)
    try:
        return DatasetManifest(
            name=doc["name"],
            known_classes=doc["known_classes"],
            open_classes=doc["open_classes"],
            scan_paths=doc.get("scan_paths", []),
            intensity_stats=doc.get("intensity_stats", (0.0, 1.0)),
            root=path.parent,
        )
    except KeyError as exc:
        raise ParseError(f"manifest is missing {exc}", path=path) from None


class SortMode(StrEnum):
    DETECTOR_SCORE = "DetectorScore"
    OOD_SCORE = "OodScore"


class EvalSubset(StrEnum):
    ALL_SCANS = "AllScans"
    OPEN_SCANS_ONLY = "OpenScansOnly"


class DistanceMode(StrEnum):
    EUCLIDEAN_3D = "Euclidean3D"
    EUCLIDEAN_BEV = "EuclideanBEV"


@dataclass(frozen=True)
class RunConfig:
    """Evaluation hyperparameters; defaults are the retained protocol choices."""

    d_thresh: float = 2.0
    delta_thresh: float = 0.3
    ood_thresh: float = 0.5
    sort_mode: SortMode = SortMode.DETECTOR_SCORE
    eval_subset: EvalSubset = EvalSubset.OPEN_SCANS_ONLY
    distance_mode: DistanceMode = DistanceMode.EUCLIDEAN_3D
    rng_seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.d_thresh) and self.d_thresh > 0):
            raise ConfigError(f"d_thresh must be > 0, got {self.d_thresh}")
        if not 0.0 <= self.delta_thresh <= 1.0:
            raise ConfigError(f"delta_thresh must lie in [0, 1], got {self.delta_thresh}")
        if not 0.0 <= self.ood_thresh <= 1.0:
            raise ConfigError(f"ood_thresh must lie in [0, 1], got {self.ood_thresh}")
        object.__setattr__(self, "sort_mode", SortMode.parse(self.sort_mode))
        object.__setattr__(self, "eval_subset", EvalSubset.parse(self.eval_subset))
        object.__setattr__(self, "distance_mode", DistanceMode.parse(self.distance_mode))


def load_run_config(path) -> RunConfig:
    return from_mapping(RunConfig, read_kv_file(path).get("", {}))


# ---------------------------------------------------------------------------
# blobs
# ---------------------------------------------------------------------------


def write_blob(path, array) -> None:
    """Little-endian float32, row-major, preceded by magic + ndim + dims (uint32)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = BLOB_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != BLOB_MAGIC or len(raw) < 8:
        raise ParseError("not a feature blob (bad magic)", path=path)
    (ndim,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(raw) - offset != 4 * count:
        raise ParseError(f"blob payload size mismatch for shape {dims}", path=path)
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------


def _read_json(path):
    path = Path(path)
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=path) from None


def _floats(values):
    return [float(v) for v in np.asarray(values).ravel()]


def _fmap_doc(fmap: FeatureMap, blob_name: str):
    return {
        "blob": blob_name,
        "rows": fmap.rows,
        "cols": fmap.cols,
        "dim": fmap.dim,
        "origin": list(fmap.origin),
        "cell_size": fmap.cell_size,
    }


def save_scan(scan: Scan, path, manifest: DatasetManifest, blobs: bool = False) -> Path:
    """Write ``scan`` as JSON. With ``blobs`` the points and embeddings go to
    float32 sidecars; feature maps always do."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    names = manifest.class_names

    doc = {"scan_id": scan.scan_id}
    if blobs:
        blob = f"{stem}.points.bin"
        write_blob(path.parent / blob, scan.cloud.points)
        doc["points"] = {"blob": blob, "count": len(scan.cloud)}
    else:
        doc["points"] = [_floats(p) for p in scan.cloud.points]

    gts = []
    for g in scan.ground_truth:
        rec = {"box": _floats(g.box.as_array()), "class": names[g.class_id] if g.class_id >= 0 else None}
        if g.point_indices is not None:
            rec["point_indices"] = [int(i) for i in g.point_indices]
        if g.forged is not None:
            rec["forged"] = g.forged
        if g.mix:
            rec["mix"] = [[names[c], w] for c, w in g.mix]
        gts.append(rec)
    doc["ground_truth"] = gts

    emb_rows = [d.embedding for d in scan.detections if d.embedding is not None]
    use_emb_blob = blobs and emb_rows and len({e.size for e in emb_rows}) == 1
    if use_emb_blob:
        blob = f"{stem}.emb.bin"
        write_blob(path.parent / blob, np.stack(emb_rows))
        doc["embedding_blob"] = blob
    dets = []
    row = 0
    for d in scan.detections:
        rec = {
            "box": _floats(d.box.as_array()),
            "score": d.score,
            "logits": _floats(d.logits),
            "predicted_class": d.predicted_class,
        }
        if d.embedding is not None:
            if use_emb_blob:
                rec["embedding"] = {"blob_offset": row}
                row += 1
            else:
                rec["embedding"] = _floats(d.embedding)
        if d.ood_score is not None:
            rec["ood_score"] = d.ood_score
        if d.logit_samples is not None:
            rec["logit_samples"] = [_floats(s) for s in d.logit_samples]
        dets.append(rec)
    doc["detections"] = dets

    for key, fmap in (("feature_map_low", scan.feature_map_low), ("feature_map_high", scan.feature_map_high)):
        if fmap is not None:
            blob = f"{stem}.{key}.bin"
            write_blob(path.parent / blob, fmap.data)
            doc[key] = _fmap_doc(fmap, blob)

    path.write_text(json.dumps(doc, separators=(",", ":")))
    return path


def _box(values, where):
    if not isinstance(values, list):
        raise ParseError(f"{where}: box must be a list of 7 numbers")
    return Box3D.from_array(values)


def load_scan(path, manifest: DatasetManifest) -> Scan:
    """Load and fully validate one scan file."""
    path = Path(path)
    doc = _read_json(path)
    base = path.parent
    try:
        return _scan_from_doc(doc, base, manifest)
    except KeyError as exc:
        raise ParseError(f"missing field {exc}", path=path) from None
    except (TypeError, AttributeError) as exc:
        raise ParseError(f"malformed record: {exc}", path=path) from None
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def _scan_from_doc(doc, base: Path, manifest: DatasetManifest) -> Scan:
    pts = doc.get("points", [])
    if isinstance(pts, dict):
        points = read_blob(base / pts["blob"])
        if points.shape[0] != int(pts["count"]):
            raise SchemaError(f"point blob holds {points.shape[0]} points, header says {pts['count']}")
    else:
        points = np.array(pts, dtype=np.float64).reshape(-1, 4)
    cloud = PointCloud(points)

    gts = []
    for i, rec in enumerate(doc.get("ground_truth", [])):
        box = _box(rec["box"], f"ground_truth[{i}]")
        forged = rec.get("forged")
        cname = rec.get("class")
        if cname is None:
            if forged is None:
                raise SchemaError(f"ground_truth[{i}] has no class")
            cid = -1
        else:
            cid = manifest.class_index(cname)
        is_open = forged is not None or manifest.is_open_class(cid)
        mix = tuple((manifest.class_index(c), w) for c, w in rec.get("mix", []))
        gts.append(GroundTruthObject(box, cid, is_open, rec.get("point_indices"), forged, mix))

    emb_table = None
    if "embedding_blob" in doc:
        emb_table = read_blob(base / doc["embedding_blob"])
    dets = []
    for i, rec in enumerate(doc.get("detections", [])):
        logits = rec["logits"]
        if len(logits) != manifest.num_known:
            raise SchemaError(
                f"detections[{i}] has {len(logits)} logits, dataset has {manifest.num_known} known classes"
            )
        emb = rec.get("embedding")
        if isinstance(emb, dict):
            if emb_table is None:
                raise SchemaError(f"detections[{i}] references an embedding blob that is absent")
            emb = emb_table[int(emb["blob_offset"])]
        dets.append(
            Detection(
                box=_box(rec["box"], f"detections[{i}]"),
                score=rec["score"],
                logits=logits,
                predicted_class=rec.get("predicted_class"),
                embedding=emb,
                ood_score=rec.get("ood_score"),
                logit_samples=rec.get("logit_samples"),
            )
        )

    fmaps = {}
    for key in ("feature_map_low", "feature_map_high"):
        meta = doc.get(key)
        if meta is None:
            fmaps[key] = None
            continue
        data = read_blob(base / meta["blob"])
        shape = (int(meta["rows"]), int(meta["cols"]), int(meta["dim"]))
        if data.shape != shape:
            raise SchemaError(f"{key} blob shape {data.shape} does not match header {shape}")
        fmaps[key] = FeatureMap(data, tuple(meta["origin"]), meta["cell_size"])

    return Scan(doc["scan_id"], cloud, tuple(gts), tuple(dets), fmaps["feature_map_low"], fmaps["feature_map_high"])


def load_scans(manifest: DatasetManifest):
    return pmap(lambda p: load_scan(p, manifest), manifest.scan_files())


def _scan_has_open(path, manifest: DatasetManifest) -> bool:
    doc = _read_json(path)
    for rec in doc.get("ground_truth", []):
        if rec.get("forged") is not None:
            return True
        name = rec.get("class")
        if name is not None and manifest.is_open_class(manifest.class_index(name)):
            return True
    return False


def filter_open_subset(manifest: DatasetManifest) -> DatasetManifest:
    """Keep only scans with at least one unknown ground-truth object."""
    flags = pmap(lambda p: _scan_has_open(manifest.resolve(p), manifest), manifest.scan_paths)
    kept = tuple(p for p, keep in zip(manifest.scan_paths, flags) if keep)
    return replace(manifest, scan_paths=kept)


def drop_open_scans(manifest: DatasetManifest) -> DatasetManifest:
    """Complement of :func:`filter_open_subset`."""
    flags = pmap(lambda p: _scan_has_open(manifest.resolve(p), manifest), manifest.scan_paths)
    kept = tuple(p for p, keep in zip(manifest.scan_paths, flags) if not keep)
    return replace(manifest, scan_paths=kept)


def relocate(manifest: DatasetManifest, scan_paths, root, name: Optional[str] = None) -> DatasetManifest:
    return replace(manifest, scan_paths=tuple(scan_paths), root=Path(root), name=name or manifest.name)
