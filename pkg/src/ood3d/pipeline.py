"""Composition of the building blocks: training-set construction under the
scan-retention rule, head scoring and end-to-end evaluation."""
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .config import from_mapping, to_mapping
from .errors import ConfigError, DegenerateDataset, NoFreeSpace, NoMemberPoints, SchemaError, TooFewEligible
from .forge import (
    ForgeConfig,
    ForgeMethod,
    Mesh,
    default_mesh_bank,
    forge_gaussian,
    forge_inject,
    forge_pointmixup,
    forge_resize,
    forge_topk,
    scan_rng,
)
from .head import HeadInput, MlpHead, TrainConfig, detection_inputs, stack_inputs, train
from .matcher import HitRates, MatchReport, hit_rates, match_scan, pooled_samples, total_confusion
from .metrics import MetricReport, evaluate
from .model import Scan
from .parallel import pmap
from .probe import ProbeConfig
from .scan_io import EvalSubset, RunConfig, SortMode
from .scorers import ScorerConfig, score_detection

SCENE_METHODS = (ForgeMethod.RESIZING, ForgeMethod.POINT_MIXUP, ForgeMethod.MESH_INJECTION)


def retains_open_scans(method: ForgeMethod) -> bool:
    """Top-K and the oracle learn from real unknowns; the generators must not see them."""
    return ForgeMethod.parse(method) in (ForgeMethod.TOP_K, ForgeMethod.ORACLE)


def retained_scans(scans: Sequence[Scan], method: ForgeMethod) -> List[Scan]:
    if retains_open_scans(method):
        return list(scans)
    return [s for s in scans if not s.has_open_objects]


def labelled_inputs(scan: Scan, run_config: RunConfig, probe_config: Optional[ProbeConfig], known_only: bool = False):
    """Matched detections labelled by their ground truth (1 = unknown)."""
    report = match_scan(scan, replace(run_config, sort_mode=SortMode.DETECTOR_SCORE), with_scores=False)
    pairs = sorted((i, j) for i, j, _ in report.pairs)
    if known_only:
        pairs = [(i, j) for i, j in pairs if not scan.ground_truth[j].is_open]
    labels = [int(scan.ground_truth[j].is_open) for _, j in pairs]
    return detection_inputs(scan, [i for i, _ in pairs], labels, probe_config)


def forge_scene(scan: Scan, config: ForgeConfig, manifest=None, mesh_bank: Optional[Dict[str, Mesh]] = None) -> Scan:
    """Apply a scene-editing generator (objects change; detections are stale until re-rendered)."""
    rng = scan_rng(config, scan.scan_id)
    if config.method is ForgeMethod.RESIZING:
        return forge_resize(scan, config, rng)
    if config.method is ForgeMethod.POINT_MIXUP:
        return forge_pointmixup(scan, config, rng)
    if config.method is ForgeMethod.MESH_INJECTION:
        if manifest is None:
            raise ConfigError("mesh injection needs the dataset manifest for intensity statistics")
        return forge_inject(scan, mesh_bank or default_mesh_bank(), manifest, config, rng)
    raise ConfigError(f"{config.method.value} does not edit scenes")


def training_inputs(
    scans: Sequence[Scan],
    forge_config: ForgeConfig,
    run_config: RunConfig = RunConfig(),
    probe_config: Optional[ProbeConfig] = ProbeConfig(),
    world=None,
    mesh_bank: Optional[Dict[str, Mesh]] = None,
) -> List[HeadInput]:
    """HeadInputs for one generation method.

    Scene-editing methods need ``world`` (a synth WorldModel) to re-render
    feature maps and detections for the edited scenes.
    """
    method = forge_config.method
    kept = retained_scans(scans, method)

    if method is ForgeMethod.ORACLE:
        per_scan = pmap(lambda s: labelled_inputs(s, run_config, probe_config), kept)
    elif method is ForgeMethod.TOP_K:
        per_scan = pmap(lambda s: forge_topk(s, forge_config, run_config, probe_config), kept)
    elif method is ForgeMethod.GAUSSIAN_NOISE:
        known = [h for part in pmap(lambda s: labelled_inputs(s, run_config, probe_config, True), kept) for h in part]
        return forge_gaussian(known, forge_config)
    else:
        if world is None:
            raise ConfigError(f"{method.value} needs a synthetic world to re-render edited scenes")
        from .synth import rerender

        def one(scan):
            try:
                edited = forge_scene(scan, forge_config, world.manifest, mesh_bank)
            except (TooFewEligible, NoFreeSpace, NoMemberPoints):
                # scans the generator cannot edit contribute their known objects only
                edited = scan
            return labelled_inputs(rerender(world, edited, forge_config.rng_seed), run_config, probe_config)

        per_scan = pmap(one, kept)
    return [h for part in per_scan for h in part]


def train_head(inputs: Sequence[HeadInput], train_config: TrainConfig, probe_config: Optional[ProbeConfig],
               forge_config: ForgeConfig) -> MlpHead:
    if not inputs:
        raise DegenerateDataset("no training inputs were produced")
    meta = {
        "probe": to_mapping(probe_config) if probe_config is not None else None,
        "forge": to_mapping(forge_config),
        "train": to_mapping(train_config),
        "n_inputs": len(inputs),
        "n_unknown": int(sum(h.y for h in inputs)),
    }
    return train(inputs, train_config, meta)


def head_probe_config(head: MlpHead) -> Optional[ProbeConfig]:
    doc = head.meta.get("probe")
    return None if doc is None else from_mapping(ProbeConfig, doc, "probe")


def head_scores(head: MlpHead, scan: Scan, probe_config: Optional[ProbeConfig] = None) -> np.ndarray:
    """p_OOD from the head for every detection of a scan."""
    if not scan.detections:
        return np.zeros(0)
    probe_config = probe_config if probe_config is not None else head_probe_config(head)
    idx = list(range(len(scan.detections)))
    x, _ = stack_inputs(detection_inputs(scan, idx, [0] * len(idx), probe_config))
    if x.shape[1] != head.widths[0]:
        raise SchemaError(f"head expects width {head.widths[0]}, scan {scan.scan_id} gives {x.shape[1]}")
    return head.predict(x)


Scorer = Union[ScorerConfig, MlpHead, None]


def scan_scores(scorer: Scorer, scan: Scan) -> Optional[List[float]]:
    """Per-detection OOD scores; ``None`` means use the stored ``ood_score`` fields."""
    if scorer is None:
        return None
    if isinstance(scorer, MlpHead):
        return [float(v) for v in head_scores(scorer, scan)]
    return [score_detection(d, scorer) for d in scan.detections]


@dataclass(frozen=True)
class EvalResult:
    metrics: MetricReport
    hits: HitRates
    reports: tuple

    @property
    def confusion(self):
        return total_confusion(self.reports)


def subset(scans: Sequence[Scan], run_config: RunConfig) -> List[Scan]:
    if run_config.eval_subset is EvalSubset.OPEN_SCANS_ONLY:
        return [s for s in scans if s.has_open_objects]
    return list(scans)


def evaluate_scans(scans: Sequence[Scan], run_config: RunConfig, scorer: Scorer) -> EvalResult:
    chosen = subset(scans, run_config)
    reports: List[MatchReport] = pmap(lambda s: match_scan(s, run_config, scan_scores(scorer, s)), chosen)
    return EvalResult(evaluate(pooled_samples(reports)), hit_rates(reports), tuple(reports))
