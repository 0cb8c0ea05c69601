"""Single-stage OOD scores computed from detector outputs only.

Every scorer returns "higher = more unknown".
"""
import math
from dataclasses import dataclass, replace

import numpy as np

from .config import StrEnum
from .errors import ConfigError, EmptyLogits, MissingSamples
from .model import Detection, Scan


class Method(StrEnum):
    DEFAULT_SCORE = "DefaultScore"
    MAX_LOGIT = "MaxLogit"
    MSP = "Msp"
    ENERGY = "Energy"
    ODIN = "OdinTemperature"
    MC_DROPOUT = "McDropout"


class McAggregation(StrEnum):
    PREDICTIVE_ENTROPY = "PredictiveEntropy"
    MAX_PROB_VARIANCE = "MaxProbVariance"


ODIN_TEMPERATURE = 1000.0


@dataclass(frozen=True)
class ScorerConfig:
    method: Method = Method.DEFAULT_SCORE
    # -1 selects the conventional value: 1000 for ODIN, 1 otherwise
    temperature: float = -1.0
    mc_aggregation: McAggregation = McAggregation.PREDICTIVE_ENTROPY

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "mc_aggregation", McAggregation.parse(self.mc_aggregation))
        t = float(self.temperature)
        object.__setattr__(self, "temperature", t)
        if not (t == -1.0 or (math.isfinite(t) and t > 0)):
            raise ConfigError(f"temperature must be > 0 (or -1 for the default), got {self.temperature}")

    @property
    def effective_temperature(self) -> float:
        if self.temperature == -1.0:
            return ODIN_TEMPERATURE if self.method is Method.ODIN else 1.0
        return self.temperature


def _logits(det):
    logits = det.logits if isinstance(det, Detection) else np.asarray(det, dtype=np.float64)
    if logits.size == 0:
        raise EmptyLogits("empty logit vector")
    return logits


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(z, axis=-1):
    return np.exp(log_softmax(z, axis=axis))


def score_default(det: Detection) -> float:
    return 1.0 - det.score


def score_max_logit(det) -> float:
    return -float(np.max(_logits(det)))


def score_msp(det, temperature: float = 1.0) -> float:
    """1 - max softmax(logits / T). T > 1 is ODIN's temperature scaling."""
    z = _logits(det) / temperature
    # max softmax = exp(max - logsumexp) = 1 / sum(exp(z - max))
    return 1.0 - 1.0 / float(np.sum(np.exp(z - np.max(z))))


def score_energy(det, temperature: float = 1.0) -> float:
    """-T * log sum exp(logits / T), computed with the max shift."""
    z = _logits(det) / temperature
    m = float(np.max(z))
    return -temperature * (m + math.log(float(np.sum(np.exp(z - m)))))


def score_mc_dropout(det, aggregation: McAggregation = McAggregation.PREDICTIVE_ENTROPY) -> float:
    samples = det.logit_samples if isinstance(det, Detection) else det
    if samples is None or len(samples) < 2:
        raise MissingSamples("MC dropout needs at least two logit samples")
    probs = softmax(np.asarray(samples, dtype=np.float64), axis=1)
    aggregation = McAggregation.parse(aggregation)
    if aggregation is McAggregation.MAX_PROB_VARIANCE:
        return float(np.var(probs.max(axis=1)))
    mean = probs.mean(axis=0)
    n_classes = mean.size
    if n_classes < 2:
        return 0.0
    nz = mean[mean > 0]
    entropy = -float(np.sum(nz * np.log(nz)))
    return entropy / math.log(n_classes)


def score_detection(det: Detection, config: ScorerConfig = ScorerConfig()) -> float:
    m = config.method
    if m is Method.DEFAULT_SCORE:
        return score_default(det)
    if m is Method.MAX_LOGIT:
        return score_max_logit(det)
    if m in (Method.MSP, Method.ODIN):
        return score_msp(det, config.effective_temperature)
    if m is Method.ENERGY:
        return score_energy(det, config.effective_temperature)
    return score_mc_dropout(det, config.mc_aggregation)


def score_scan(scan: Scan, config: ScorerConfig = ScorerConfig()) -> Scan:
    """Return a copy of ``scan`` whose detections carry ``ood_score``."""
    dets = tuple(replace(d, ood_score=score_detection(d, config)) for d in scan.detections)
    return replace(scan, detections=dets)
