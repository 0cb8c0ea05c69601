"""Two-stage OOD head: a 3-layer MLP, d -> d/2 -> d/4 -> 1, ReLU hidden units,
sigmoid output, trained with BCE or focal loss on (embedding, box, logits).
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import StrEnum, to_mapping
from .errors import DegenerateDataset, SchemaError, WidthMismatch
from .model import Box3D, Scan
from .probe import ProbeConfig, probe_scan

EPS = 1e-7
SIZE_SCALE = 10.0
DEFAULT_EXTENT = 100.0
HEAD_FORMAT = "ood3d-mlp-head/1"


class Loss(StrEnum):
    BCE = "Bce"
    FOCAL = "Focal"


class Optimizer(StrEnum):
    SGD = "Sgd"
    ADAM = "Adam"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr0: float = 1e-3
    poly_power: float = 3.0
    loss: Loss = Loss.FOCAL
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    batch_size: int = 32
    optimizer: Optimizer = Optimizer.ADAM
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss.parse(self.loss))
        object.__setattr__(self, "optimizer", Optimizer.parse(self.optimizer))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.focal_gamma < 0 or not 0 < self.focal_alpha <= 1:
            raise ValueError("focal_gamma must be >= 0 and focal_alpha in (0, 1]")


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HeadInput:
    """Concatenated (embedding, normalised box, logits) vector with its label."""

    x: np.ndarray
    y: int
    embed_dim: int
    provenance: str = ""

    @property
    def embedding(self) -> np.ndarray:
        return self.x[: self.embed_dim]


def normalize_box(box: Box3D, extent: float = DEFAULT_EXTENT) -> np.ndarray:
    half = 0.5 * extent
    return np.array(
        [box.cx / half, box.cy / half, box.cz / half, box.l / SIZE_SCALE, box.w / SIZE_SCALE, box.h / SIZE_SCALE, box.yaw / math.pi]
    )


def make_head_input(embedding, box: Box3D, logits, y: int, extent: float = DEFAULT_EXTENT, provenance: str = "") -> HeadInput:
    emb = np.asarray(embedding, dtype=np.float64).ravel()
    x = np.concatenate([emb, normalize_box(box, extent), np.asarray(logits, dtype=np.float64).ravel()])
    return HeadInput(x, int(y), emb.size, provenance)


def scan_extent(scan: Scan) -> float:
    """Side length used to normalise box centres: the feature-map span if known."""
    fmap = scan.feature_map_high or scan.feature_map_low
    if fmap is None:
        return DEFAULT_EXTENT
    return float(max(fmap.extent))


def detection_inputs(
    scan: Scan,
    indices: Sequence[int],
    labels: Sequence[int],
    probe_config: Optional[ProbeConfig] = None,
    provenance: str = "",
) -> List[HeadInput]:
    """HeadInputs for chosen detections of a scan.

    Embeddings are probed from the scan's feature map when ``probe_config`` is
    given, otherwise the detections' stored embeddings are used.
    """
    indices = list(indices)
    if not indices:
        return []
    dets = [scan.detections[i] for i in indices]
    if probe_config is not None:
        emb = probe_scan(scan, probe_config, centers=[(d.box.cx, d.box.cy) for d in dets])
    else:
        if any(d.embedding is None for d in dets):
            raise SchemaError(f"scan {scan.scan_id}: detection without embedding and no feature map probe")
        emb = [d.embedding for d in dets]
    extent = scan_extent(scan)
    tag = provenance or scan.scan_id
    return [
        make_head_input(e, d.box, d.logits, y, extent, f"{tag}#{i}")
        for e, d, y, i in zip(emb, dets, labels, indices)
    ]


def stack_inputs(inputs: Sequence[HeadInput]):
    if not inputs:
        raise DegenerateDataset("no training inputs")
    widths = {h.x.size for h in inputs}
    if len(widths) != 1:
        raise WidthMismatch(f"inconsistent input widths {sorted(widths)}")
    return np.stack([h.x for h in inputs]), np.array([h.y for h in inputs], dtype=np.float64)


def save_jsonl(inputs: Sequence[HeadInput], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for h in inputs:
            rec = {"x": [float(v) for v in h.x], "y": h.y, "provenance": h.provenance, "embed_dim": h.embed_dim}
            fh.write(json.dumps(rec) + "\n")
    return path


def load_jsonl(path) -> List[HeadInput]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                x = np.array(rec["x"], dtype=np.float64)
                out.append(HeadInput(x, int(rec["y"]), int(rec.get("embed_dim", x.size)), rec.get("provenance", "")))
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def head_widths(d: int) -> List[int]:
    if d < 4:
        raise WidthMismatch(f"input width must be >= 4 for the halving rule, got {d}")
    return [d, d // 2, d // 4, 1]


@dataclass
class MlpHead:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    meta: dict = field(default_factory=dict)
    loss_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        widths = self.widths
        if widths != head_widths(widths[0]):
            raise WidthMismatch(f"layer widths {widths} break the halving rule")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise WidthMismatch("bias does not match its layer")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite parameters")

    @property
    def widths(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "MlpHead":
        """Glorot-uniform weights, zero biases."""
        widths = head_widths(d)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, d: int) -> "MlpHead":
        widths = head_widths(d)
        return cls([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])], [np.zeros(b) for b in widths[1:]])

    def params(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpHead":
        return MlpHead([w.copy() for w in self.weights], [b.copy() for b in self.biases], dict(self.meta), list(self.loss_history))

    def _forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.widths[0]:
            raise WidthMismatch(f"input width {x.shape[1]} != head width {self.widths[0]}")
        a1 = x @ self.weights[0] + self.biases[0]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ self.weights[1] + self.biases[1]
        h2 = np.maximum(a2, 0.0)
        z = (h2 @ self.weights[2] + self.biases[2])[:, 0]
        return x, a1, h1, a2, h2, z

    def logit(self, x) -> np.ndarray:
        return self._forward(x)[-1]

    def predict(self, x) -> np.ndarray:
        """p_OOD for each row of ``x``."""
        return sigmoid(self.logit(x))

    def forward(self, x) -> float:
        """p_OOD for a single input vector."""
        x = x.x if isinstance(x, HeadInput) else x
        return float(self.predict(np.asarray(x).reshape(1, -1))[0])

    def loss_and_grads(self, x, y, config: TrainConfig):
        """Mean loss over the batch and its gradient for every parameter (params() order)."""
        x, a1, h1, a2, h2, z = self._forward(x)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        n = z.shape[0]
        losses, dz = loss_and_dlogit(z, y, config)
        dz = (dz / n)[:, None]
        g_w3 = h2.T @ dz
        g_b3 = dz.sum(axis=0)
        d2 = (dz @ self.weights[2].T) * (a2 > 0)
        g_w2 = h1.T @ d2
        g_b2 = d2.sum(axis=0)
        d1 = (d2 @ self.weights[1].T) * (a1 > 0)
        g_w1 = x.T @ d1
        g_b1 = d1.sum(axis=0)
        return float(losses.mean()), [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]

    # -- persistence -------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = path.with_suffix(".weights.bin").name
        flat = np.concatenate([p.ravel() for p in self.params()]).astype("<f8")
        (path.parent / blob).write_bytes(flat.tobytes())
        doc = {"format": HEAD_FORMAT, "widths": self.widths, "weights_blob": blob, "meta": self.meta, "loss_history": self.loss_history}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MlpHead":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != HEAD_FORMAT:
            raise ValueError(f"{path}: not a saved head")
        widths = doc["widths"]
        flat = np.frombuffer((path.parent / doc["weights_blob"]).read_bytes(), dtype="<f8").astype(np.float64)
        weights, biases, k = [], [], 0
        for a, b in zip(widths[:-1], widths[1:]):
            weights.append(flat[k:k + a * b].reshape(a, b).copy())
            k += a * b
            biases.append(flat[k:k + b].copy())
            k += b
        if k != flat.size:
            raise ValueError(f"{path}: weight blob size does not match widths {widths}")
        return cls(weights, biases, doc.get("meta", {}), doc.get("loss_history", []))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss(p, y, config: TrainConfig = TrainConfig()):
    """Per-sample BCE or focal loss on probabilities, clamped to [EPS, 1 - EPS]."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=np.float64)
    if config.loss is Loss.BCE:
        out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    else:
        pt = np.where(y == 1, p, 1.0 - p)
        at = np.where(y == 1, config.focal_alpha, 1.0 - config.focal_alpha)
        out = -at * (1.0 - pt) ** config.focal_gamma * np.log(pt)
    return float(out) if out.ndim == 0 else out


def loss_and_dlogit(z, y, config: TrainConfig):
    """Per-sample loss and its derivative w.r.t. the pre-sigmoid logit."""
    p_raw = sigmoid(z)
    p = np.clip(p_raw, EPS, 1.0 - EPS)
    live = (p_raw > EPS) & (p_raw < 1.0 - EPS)
    if config.loss is Loss.BCE:
        losses = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
        dz = p - y
    else:
        pos = y == 1
        pt = np.where(pos, p, 1.0 - p)
        at = np.where(pos, config.focal_alpha, 1.0 - config.focal_alpha)
        g = config.focal_gamma
        q = 1.0 - pt
        logpt = np.log(pt)
        losses = -at * q**g * logpt
        # dL/dpt = at * (g q^(g-1) log pt - q^g / pt);  dpt/dz = +-pt q
        d_pt = at * (g * q**g * pt * logpt - q ** (g + 1.0))
        dz = np.where(pos, d_pt, -d_pt)
    return losses, np.where(live, dz, 0.0)


def lr_at(step: int, total: int, config: TrainConfig) -> float:
    """Polynomial decay lr0 * (1 - t/T)^power."""
    frac = min(max(step / total, 0.0), 1.0)
    return config.lr0 * (1.0 - frac) ** config.poly_power


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(dataset: Sequence[HeadInput], config: TrainConfig = TrainConfig(), meta: Optional[dict] = None) -> MlpHead:
    x, y = stack_inputs(dataset)
    if np.unique(y).size < 2:
        raise DegenerateDataset("training data must contain both known (0) and unknown (1) labels")
    rng = np.random.default_rng(config.rng_seed)
    head = MlpHead.init(x.shape[1], rng)
    n = x.shape[0]
    bs = config.batch_size
    per_epoch = math.ceil(n / bs)
    total = config.epochs * per_epoch
    adam = config.optimizer is Optimizer.ADAM
    if adam:
        m = [np.zeros_like(p) for p in head.params()]
        v = [np.zeros_like(p) for p in head.params()]
        b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        running = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            batch_loss, grads = head.loss_and_grads(x[idx], y[idx], config)
            running += batch_loss * idx.size
            lr = lr_at(step, total, config)
            for k, (p, g) in enumerate(zip(head.params(), grads)):
                if adam:
                    m[k] = b1 * m[k] + (1 - b1) * g
                    v[k] = b2 * v[k] + (1 - b2) * g * g
                    mhat = m[k] / (1 - b1 ** (step + 1))
                    vhat = v[k] / (1 - b2 ** (step + 1))
                    p -= lr * mhat / (np.sqrt(vhat) + eps)
                else:
                    p -= lr * g
            step += 1
        history.append(running / n)
    head.loss_history = history
    head.meta = dict(meta or {})
    head.meta.setdefault("train_config", to_mapping(config))
    return head


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def grad_check(head: MlpHead, x, y, config: TrainConfig = TrainConfig(), step: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps exact
    zeros (dead units) from dividing by zero.
    """
    x = np.atleast_2d(np.asarray(x.x if isinstance(x, HeadInput) else x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _, grads = head.loss_and_grads(x, y, config)
    worst = 0.0
    for p, g in zip(head.params(), grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            lp, _ = head.loss_and_grads(x, y, config)
            flat[i] = keep - step
            lm, _ = head.loss_and_grads(x, y, config)
            flat[i] = keep
            num = (lp - lm) / (2.0 * step)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
