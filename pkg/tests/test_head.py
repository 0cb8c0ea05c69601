import math

import numpy as np
import pytest

from ood3d.errors import DegenerateDataset, SchemaError, WidthMismatch
from ood3d.head import (
    HeadInput,
    MlpHead,
    TrainConfig,
    detection_inputs,
    grad_check,
    head_widths,
    load_jsonl,
    loss,
    loss_and_dlogit,
    lr_at,
    make_head_input,
    normalize_box,
    save_jsonl,
    train,
)
from ood3d.metrics import auroc
from ood3d.model import Box3D, FeatureMap, Scan
from ood3d.probe import ProbeConfig

from conftest import det_at

BCE = TrainConfig(loss="Bce")
FOCAL = TrainConfig(loss="Focal")


def separable(rng, n=400, d=64):
    """Two well separated 2D Gaussians, lifted to width d by a fixed linear map."""
    y = (rng.random(n) < 0.5).astype(int)
    y[:2] = [0, 1]
    pts = rng.normal(size=(n, 2)) * 0.5 + np.where(y[:, None] == 1, 2.0, -2.0)
    lift = np.random.default_rng(99).normal(size=(2, d)) / np.sqrt(2)
    return [HeadInput(row, int(t), d) for row, t in zip(pts @ lift, y)]


def epochs_ok(history, slack=0.05):
    ups = [(a, b) for a, b in zip(history, history[1:]) if b > a]
    return len(ups) <= 1 and all(b <= a * (1 + slack) for a, b in ups)


class TestArchitecture:
    @pytest.mark.parametrize("d", [4, 5, 7, 64, 215, 1000])
    def test_halving(self, d, rng):
        head = MlpHead.init(d, rng)
        assert head.widths == [d, d // 2, d // 4, 1]

    def test_too_narrow(self):
        with pytest.raises(WidthMismatch):
            head_widths(3)

    def test_zero_head(self, rng):
        head = MlpHead.zeros(12)
        assert head.forward(rng.normal(size=12)) == 0.5

    def test_width_mismatch(self, rng):
        with pytest.raises(WidthMismatch):
            MlpHead.init(8, rng).forward(np.zeros(9))

    def test_hand_set(self):
        # 4 -> 2 -> 1 -> 1 with weights picked so the arithmetic is easy
        w1 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0], [0.0, 0.0]])
        b1 = np.array([0.0, -1.0])
        w2 = np.array([[2.0], [1.0]])
        b2 = np.array([0.5])
        w3 = np.array([[-1.0]])
        b3 = np.array([0.25])
        head = MlpHead([w1, w2, w3], [b1, b2, b3])
        x = np.array([1.0, 3.0, 0.5, 9.0])
        # layer 1: [1 + 0.5, 3 - 0.5 - 1] = [1.5, 1.5]; layer 2: 3 + 1.5 + 0.5 = 5; out: -5 + 0.25
        assert head.forward(x) == pytest.approx(1 / (1 + math.exp(4.75)), abs=1e-15)

    def test_monotone_with_positive_weights(self, rng):
        head = MlpHead.init(16, rng)
        head = MlpHead([np.abs(w) for w in head.weights], [np.abs(b) for b in head.biases])
        x = rng.normal(size=16)
        base = head.forward(x)
        for k in range(16):
            bumped = x.copy()
            bumped[k] += 0.5
            assert head.forward(bumped) >= base


class TestLoss:
    def test_exact_labels(self):
        for cfg in (BCE, FOCAL):
            assert loss(1.0, 1, cfg) == pytest.approx(0.0, abs=1e-6)
            assert loss(0.0, 0, cfg) == pytest.approx(0.0, abs=1e-6)

    def test_focal_value(self):
        assert loss(0.5, 1, FOCAL) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-15)
        assert loss(0.5, 1, FOCAL) == pytest.approx(0.04332, abs=1e-5)

    def test_focal_reduces_to_bce(self, rng):
        cfg = TrainConfig(loss="Focal", focal_gamma=0.0, focal_alpha=1.0)
        p = rng.uniform(0.01, 0.99, 50)
        np.testing.assert_allclose(loss(p, np.ones(50), cfg), loss(p, np.ones(50), BCE), rtol=0, atol=1e-15)

    def test_focal_downweights_easy(self):
        r_easy = loss(0.9, 1, FOCAL) / loss(0.9, 1, BCE)
        r_hard = loss(0.5, 1, FOCAL) / loss(0.5, 1, BCE)
        assert r_easy < r_hard

    def test_saturated_gradient_is_zero(self):
        _, dz = loss_and_dlogit(np.array([40.0]), np.array([1.0]), FOCAL)
        assert dz[0] == 0.0


class TestGradients:
    def test_grad_check(self, rng):
        for cfg in (BCE, FOCAL, TrainConfig(loss="Focal", focal_gamma=0.5, focal_alpha=0.7)):
            for _ in range(10):
                d = int(rng.integers(4, 12))
                head = MlpHead.init(d, rng)
                head.biases = [b + rng.normal(0, 0.1, b.shape) for b in head.biases]
                x = rng.normal(size=(3, d))
                y = rng.integers(0, 2, 3)
                assert grad_check(head, x, y, cfg) < 1e-4

    def test_focal_gamma0_alpha1_matches_bce(self, rng):
        cfg = TrainConfig(loss="Focal", focal_gamma=0.0, focal_alpha=1.0)
        for _ in range(20):
            head = MlpHead.init(10, rng)
            x = rng.normal(size=(4, 10))
            y = np.ones(4)
            _, g_f = head.loss_and_grads(x, y, cfg)
            _, g_b = head.loss_and_grads(x, y, BCE)
            for a, b in zip(g_f, g_b):
                np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig()
        assert lr_at(0, 100, cfg) == 1e-3
        assert lr_at(100, 100, cfg) == 0.0
        assert lr_at(50, 100, cfg) == pytest.approx(1e-3 * 0.125)


class TestTraining:
    def test_separable(self, rng):
        data = separable(rng)
        head = train(data, TrainConfig())
        x = np.stack([h.x for h in data])
        y = np.array([h.y for h in data], dtype=bool)
        assert auroc((head.predict(x), y)) >= 0.99
        assert len(head.loss_history) == 5 and epochs_ok(head.loss_history)

    def test_sgd_variant_runs(self, rng):
        head = train(separable(rng, 100, 16), TrainConfig(optimizer="Sgd", batch_size=256))
        assert len(head.loss_history) == 5

    def test_deterministic(self, rng):
        data = separable(rng, 200, 16)
        a = train(data, TrainConfig(rng_seed=3))
        b = train(data, TrainConfig(rng_seed=3))
        for p, q in zip(a.params(), b.params()):
            assert p.tobytes() == q.tobytes()

    def test_single_label(self, rng):
        data = [HeadInput(rng.normal(size=8), 0, 8) for _ in range(10)]
        with pytest.raises(DegenerateDataset):
            train(data)

    def test_mixed_widths(self, rng):
        with pytest.raises(WidthMismatch):
            train([HeadInput(np.zeros(8), 0, 8), HeadInput(np.zeros(9), 1, 9)])


class TestPersistence:
    def test_save_load(self, tmp_path, rng):
        head = train(separable(rng, 100, 16), meta={"note": "x"})
        p = head.save(tmp_path / "head.json")
        back = MlpHead.load(p)
        assert back.widths == head.widths and back.meta["note"] == "x"
        for a, b in zip(head.params(), back.params()):
            assert a.tobytes() == b.tobytes()
        assert back.loss_history == head.loss_history

    def test_jsonl(self, tmp_path, rng):
        data = separable(rng, 20, 8)
        back = load_jsonl(save_jsonl(data, tmp_path / "in.jsonl"))
        assert [h.y for h in back] == [h.y for h in data]
        assert all(np.array_equal(a.x, b.x) for a, b in zip(data, back))


class TestInputs:
    def test_layout(self):
        box = Box3D(10, -20, 1, 4, 2, 1.5, math.pi / 2)
        h = make_head_input([1.0, 2.0], box, [0.5, -0.5, 0.0], 1, extent=100)
        np.testing.assert_allclose(h.x, [1, 2, 0.2, -0.4, 0.02, 0.4, 0.2, 0.15, 0.5, 0.5, -0.5, 0.0])
        np.testing.assert_allclose(normalize_box(box, 100)[:3], [0.2, -0.4, 0.02])
        assert h.embed_dim == 2

    def test_detection_inputs(self, rng):
        fmap = FeatureMap(rng.normal(size=(10, 10, 4)), (0.0, 0.0), 1.0)
        scan = Scan("s", detections=(det_at(2, 3, embedding=[1, 2]), det_at(5, 5)), feature_map_high=fmap)
        probed = detection_inputs(scan, [0, 1], [0, 1], ProbeConfig())
        assert [h.embed_dim for h in probed] == [4, 4] and probed[1].provenance == "s#1"
        stored = detection_inputs(scan, [0], [1])
        np.testing.assert_array_equal(stored[0].embedding, [1, 2])
        with pytest.raises(SchemaError):
            detection_inputs(scan, [1], [0])
