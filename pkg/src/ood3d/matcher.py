"""Greedy, confidence-ordered prediction to ground-truth matching.

Per scan: gate detections by detector score, sort the survivors by the
configured confidence key, then let each one claim the closest unclaimed
ground truth if it lies within ``d_thresh``. Detections that find nothing in
range are ignored (they feed no metric). Iteration stops early once every
ground truth is claimed.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import EmptyPartition, MissingOodScore
from .model import Scan, center_distance_matrix
from .scan_io import DistanceMode, RunConfig, SortMode


@dataclass(frozen=True)
class Confusion:
    """Counts at ``ood_thresh`` with "open" as the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0


@dataclass(frozen=True)
class MatchReport:
    scan_id: str
    pairs: Tuple[Tuple[int, int, float], ...]
    unmatched_detections: Tuple[int, ...]
    unmatched_gts: Tuple[int, ...]
    scored_samples: Tuple[Tuple[float, bool], ...]
    confusion: Optional[Confusion]
    gt_is_open: Tuple[bool, ...]
    discarded: Tuple[int, ...] = ()

    @property
    def matched_open(self) -> int:
        return sum(1 for _, g, _ in self.pairs if self.gt_is_open[g])

    @property
    def matched_closed(self) -> int:
        return len(self.pairs) - self.matched_open


@dataclass(frozen=True)
class HitRates:
    hits_open: float
    hits_closed: float


def match_scan(
    scan: Scan,
    config: RunConfig = RunConfig(),
    ood_scores: Optional[Sequence[float]] = None,
    with_scores: bool = True,
) -> MatchReport:
    """Match one scan's detections to its ground truth.

    ``ood_scores`` overrides the detections' stored ``ood_score`` (one value
    per detection). With ``with_scores=False`` no samples or confusion counts
    are produced and missing scores are tolerated (hit-rate-only use).
    """
    dets = scan.detections
    gts = scan.ground_truth
    if ood_scores is None:
        ood = [d.ood_score for d in dets]
    else:
        ood = [None if s is None else float(s) for s in ood_scores]
        if len(ood) != len(dets):
            raise ValueError(f"got {len(ood)} ood scores for {len(dets)} detections")

    survivors = [i for i, d in enumerate(dets) if d.score >= config.delta_thresh]
    discarded = tuple(i for i, d in enumerate(dets) if d.score < config.delta_thresh)

    need_ood = with_scores or config.sort_mode is SortMode.OOD_SCORE
    if need_ood:
        missing = [i for i in survivors if ood[i] is None]
        if missing:
            raise MissingOodScore(f"scan {scan.scan_id}: detections {missing} have no ood_score")

    if config.sort_mode is SortMode.DETECTOR_SCORE:
        keys = np.array([dets[i].score for i in survivors], dtype=np.float64)
    else:
        keys = np.array([ood[i] for i in survivors], dtype=np.float64)
    # stable descending sort: equal keys keep ascending detection index
    order = np.argsort(-keys, kind="stable").astype(np.int64)

    bev = config.distance_mode is DistanceMode.EUCLIDEAN_BEV
    dist = center_distance_matrix([dets[i].box for i in survivors], [g.box for g in gts], bev=bev)
    local = kernels.greedy_match(np.ascontiguousarray(dist), order, float(config.d_thresh))

    pairs = []
    ignored = []
    for k in order:
        j = int(local[k])
        i = survivors[k]
        if j >= 0:
            pairs.append((i, j, float(dist[k, j])))
        else:
            ignored.append(i)
    matched_gt = {j for _, j, _ in pairs}
    unmatched_gts = tuple(j for j in range(len(gts)) if j not in matched_gt)

    samples = ()
    confusion = None
    if with_scores:
        samples = tuple((ood[i], gts[j].is_open) for i, j, _ in pairs)
        tp = fp = tn = fn = 0
        for s, is_open in samples:
            predicted_open = s > config.ood_thresh
            if is_open:
                tp += predicted_open
                fn += not predicted_open
            else:
                fp += predicted_open
                tn += not predicted_open
        confusion = Confusion(tp, fp, tn, fn)

    return MatchReport(
        scan_id=scan.scan_id,
        pairs=tuple(pairs),
        unmatched_detections=tuple(ignored),
        unmatched_gts=unmatched_gts,
        scored_samples=samples,
        confusion=confusion,
        gt_is_open=tuple(g.is_open for g in gts),
        discarded=discarded,
    )


def hit_rates(reports: Sequence[MatchReport]) -> HitRates:
    """Fraction of open / closed ground truth objects claimed by some prediction."""
    n_open = sum(sum(r.gt_is_open) for r in reports)
    n_closed = sum(len(r.gt_is_open) - sum(r.gt_is_open) for r in reports)
    if n_open == 0 or n_closed == 0:
        raise EmptyPartition(f"hit rate undefined: {n_open} open and {n_closed} closed ground-truth objects")
    m_open = sum(r.matched_open for r in reports)
    m_closed = sum(r.matched_closed for r in reports)
    return HitRates(m_open / n_open, m_closed / n_closed)


def pooled_samples(reports: Sequence[MatchReport]) -> List[Tuple[float, bool]]:
    """Concatenate samples in scan_id order so pooled metrics are order-independent."""
    out = []
    for r in sorted(reports, key=lambda r: r.scan_id):
        out.extend(r.scored_samples)
    return out


def total_confusion(reports: Sequence[MatchReport]) -> Confusion:
    tp = fp = tn = fn = 0
    for r in reports:
        if r.confusion is not None:
            tp += r.confusion.tp
            fp += r.confusion.fp
            tn += r.confusion.tn
            fn += r.confusion.fn
    return Confusion(tp, fp, tn, fn)
