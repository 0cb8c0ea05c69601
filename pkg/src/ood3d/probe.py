"""Per-detection embedding extraction from BEV feature maps.

Grid convention: x runs along columns, y along rows, and cell (0, 0) is
centred on the map origin, so cell centres land on integer coordinates.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import StrEnum
from .errors import OutOfBounds, SchemaError
from .model import FeatureMap, Scan

DEFAULT_CELL_SIZE = 1.4


class Source(StrEnum):
    LOW_DIM = "LowDim"
    HIGH_DIM = "HighDim"


@dataclass(frozen=True)
class ProbeConfig:
    source: Source = Source.HIGH_DIM
    interpolate: bool = True
    pool3x3: bool = True

    def __post_init__(self):
        object.__setattr__(self, "source", Source.parse(self.source))


def aggregation_radius(cell_size: float) -> float:
    """Half-width in meters of the neighbourhood one pooled 3x3 cell covers."""
    return 1.5 * cell_size


def world_to_grid(fmap: FeatureMap, x: float, y: float):
    """Continuous (row, col) of a world point."""
    return (y - fmap.origin[1]) / fmap.cell_size, (x - fmap.origin[0]) / fmap.cell_size


def pool_map(fmap: FeatureMap) -> FeatureMap:
    """Per-channel 3x3 max pooling, stride 1, edge-replicated borders."""
    pooled = kernels.maxpool3x3(np.ascontiguousarray(fmap.data))
    return FeatureMap(pooled, fmap.origin, fmap.cell_size)


def _clamp(v, n, axis):
    # half a cell of slack past either border, clamped onto the edge cell
    if not (-0.5 <= v <= n - 0.5):
        raise OutOfBounds(f"{axis} coordinate {v:.3f} outside grid of {n} cells")
    return min(max(v, 0.0), n - 1.0)


def _round_half_away(v):
    return int(math.floor(v + 0.5)) if v >= 0 else -int(math.floor(-v + 0.5))


def sample(fmap: FeatureMap, x: float, y: float, interpolate: bool) -> np.ndarray:
    r, c = world_to_grid(fmap, x, y)
    r = _clamp(r, fmap.rows, "row")
    c = _clamp(c, fmap.cols, "col")
    data = fmap.data
    if not interpolate:
        return data[_round_half_away(r), _round_half_away(c)].astype(np.float32)
    r0 = int(math.floor(r))
    c0 = int(math.floor(c))
    r1 = min(r0 + 1, fmap.rows - 1)
    c1 = min(c0 + 1, fmap.cols - 1)
    fr = r - r0
    fc = c - c0
    top = (1.0 - fc) * data[r0, c0].astype(np.float64) + fc * data[r0, c1]
    bottom = (1.0 - fc) * data[r1, c0].astype(np.float64) + fc * data[r1, c1]
    return ((1.0 - fr) * top + fr * bottom).astype(np.float32)


def select_map(scan: Scan, config: ProbeConfig) -> FeatureMap:
    fmap = scan.feature_map_high if config.source is Source.HIGH_DIM else scan.feature_map_low
    if fmap is None:
        raise SchemaError(f"scan {scan.scan_id} has no {config.source.value} feature map")
    return fmap


def probe(fmap: FeatureMap, center, config: ProbeConfig = ProbeConfig(), pooled: bool = False) -> np.ndarray:
    """Embedding at a world (x, y[, z]) centre; ``pooled=True`` means ``fmap`` is already pooled."""
    if config.pool3x3 and not pooled:
        fmap = pool_map(fmap)
    return sample(fmap, float(center[0]), float(center[1]), config.interpolate)


def probe_scan(scan: Scan, config: ProbeConfig = ProbeConfig(), centers=None) -> np.ndarray:
    """(n, dim) embeddings for every detection of ``scan`` (or the given centres).

    The pooled map is computed once and shared by all probes.
    """
    fmap = select_map(scan, config)
    if config.pool3x3:
        fmap = pool_map(fmap)
    if centers is None:
        centers = [(d.box.cx, d.box.cy) for d in scan.detections]
    out = np.zeros((len(centers), fmap.dim), dtype=np.float32)
    for i, (x, y, *_) in enumerate(centers):
        out[i] = sample(fmap, x, y, config.interpolate)
    return out
