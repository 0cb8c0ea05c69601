import math

import numpy as np
import pytest

from ood3d.model import Box3D, Detection, FeatureMap, GroundTruthObject, PointCloud, Scan
from ood3d.scan_io import DatasetManifest

KNOWN = ("Car", "Pedestrian", "Cyclist")
OPEN = ("Stroller",)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def manifest(tmp_path):
    return DatasetManifest("test", KNOWN, OPEN, (), (0.3, 0.1), tmp_path)


def random_box(rng, spread=20.0, size=(0.5, 5.0)):
    return Box3D(*rng.uniform(-spread, spread, 2), rng.uniform(0, 2), *rng.uniform(*size, 3), rng.uniform(-math.pi, math.pi))


def det_at(x, y, z=0.0, score=0.9, ood=None, n_classes=3, dims=(1.0, 1.0, 1.0), **kw):
    logits = np.zeros(n_classes)
    logits[0] = 1.0
    return Detection(Box3D(x, y, z, *dims), score, logits, ood_score=ood, **kw)


def gt_at(x, y, z=0.0, is_open=False, dims=(1.0, 1.0, 1.0), class_id=None, **kw):
    cid = class_id if class_id is not None else (3 if is_open else 0)
    return GroundTruthObject(Box3D(x, y, z, *dims), cid, is_open, **kw)


def random_scan(rng, scan_id="s", n_det=None, n_gt=None, n_points=None, fmap=False, emb_dim=4, samples=False,
                n_classes=3):
    n_det = int(rng.integers(0, 7)) if n_det is None else n_det
    n_gt = int(rng.integers(0, 7)) if n_gt is None else n_gt
    n_points = int(rng.integers(0, 50)) if n_points is None else n_points
    pts = np.c_[rng.normal(size=(n_points, 3)) * 10, rng.uniform(0, 1, n_points)].astype(np.float32)
    gts = []
    for _ in range(n_gt):
        is_open = bool(rng.random() < 0.4)
        cid = int(rng.integers(3, 3 + len(OPEN))) if is_open else int(rng.integers(0, 3))
        idx = rng.choice(n_points, size=min(n_points, 5), replace=False) if n_points and rng.random() < 0.7 else None
        gts.append(GroundTruthObject(random_box(rng), cid, is_open, idx))
    dets = []
    for _ in range(n_det):
        logits = rng.normal(size=n_classes) * 3
        dets.append(
            Detection(
                random_box(rng),
                float(rng.random()),
                logits,
                embedding=rng.normal(size=emb_dim).astype(np.float32) if emb_dim else None,
                ood_score=float(rng.random()) if rng.random() < 0.8 else None,
                logit_samples=rng.normal(size=(3, n_classes)) if samples else None,
            )
        )
    low = high = None
    if fmap:
        low = FeatureMap(rng.normal(size=(5, 6, 3)), tuple(rng.normal(size=2)), 1.4)
        high = FeatureMap(rng.normal(size=(5, 6, 8)), tuple(rng.normal(size=2)), 1.4)
    return Scan(scan_id, PointCloud(pts), tuple(gts), tuple(dets), low, high)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
