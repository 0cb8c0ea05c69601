"""OOD evaluation toolkit for 3D object detection.

Matching and metrics for unknown-object scoring, single-stage scorers, a
two-stage MLP head over BEV features, pseudo-unknown generators and a
synthetic benchmark.
"""
from ._accel import USE_NUMBA
from .errors import OodError
from .head import HeadInput, MlpHead, TrainConfig
from .matcher import HitRates, MatchReport, hit_rates, match_scan
from .metrics import MetricReport, aupr, auroc, evaluate, fpr_at_tpr
from .model import Box3D, Detection, FeatureMap, GroundTruthObject, PointCloud, Scan
from .probe import ProbeConfig
from .scan_io import DatasetManifest, RunConfig, load_manifest, load_scan, save_scan
from .scorers import ScorerConfig, score_detection

__version__ = "0.1.0"
