import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ood3d.errors import OutOfBounds, SchemaError
from ood3d.model import FeatureMap, Scan
from ood3d.probe import ProbeConfig, aggregation_radius, pool_map, probe, probe_scan, sample, world_to_grid
from ood3d.synth import WorldConfig

from conftest import det_at

RAW = ProbeConfig(pool3x3=False)


def fmap(data, origin=(0.0, 0.0), cell=1.0):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[..., None]
    return FeatureMap(data, origin, cell)


class TestGrid:
    def test_examples(self):
        m = fmap(np.zeros((4, 4)), origin=(10.0, -3.0), cell=2.0)
        assert world_to_grid(m, 10.0, -3.0) == (0.0, 0.0)
        assert world_to_grid(m, 12.0, -3.0) == (0.0, 1.0)
        assert world_to_grid(m, 10.0 + 2.5 * 2, -3.0 + 1.25 * 2) == (1.25, 2.5)


class TestProbe:
    def test_constant_map(self, rng):
        m = fmap(np.full((5, 6, 3), 0.7))
        for cfg in (ProbeConfig(interpolate=i, pool3x3=p) for i in (True, False) for p in (True, False)):
            for _ in range(10):
                x, y = rng.uniform(-0.5, 5.5), rng.uniform(-0.5, 4.5)
                np.testing.assert_array_equal(probe(m, (x, y), cfg), np.full(3, 0.7, np.float32))

    def test_bilinear_midpoint(self):
        m = fmap([[0, 1], [2, 3]])
        assert probe(m, (0.5, 0.5), RAW)[0] == 1.5

    def test_pooled_spike(self):
        data = np.zeros((3, 3))
        data[1, 1] = 5
        m = fmap(data)
        cfg = ProbeConfig(interpolate=False, pool3x3=True)
        for r in range(3):
            for c in range(3):
                assert probe(m, (c, r), cfg)[0] == 5.0

    def test_nearest_rounds_half_away(self):
        m = fmap([[0, 1, 2]])
        cfg = ProbeConfig(interpolate=False, pool3x3=False)
        assert probe(m, (0.5, 0), cfg)[0] == 1.0
        assert probe(m, (1.5, 0), cfg)[0] == 2.0
        assert probe(m, (-0.4, 0), cfg)[0] == 0.0

    def test_clamp_margin(self):
        m = fmap([[0, 1], [2, 3]])
        assert probe(m, (-0.5, -0.5), RAW)[0] == 0.0
        assert probe(m, (1.5, 1.5), RAW)[0] == 3.0
        with pytest.raises(OutOfBounds):
            probe(m, (-0.51, 0.0), RAW)
        with pytest.raises(OutOfBounds):
            probe(m, (0.0, 1.6), RAW)

    def test_centres_agree_with_nearest(self, rng):
        m = fmap(rng.normal(size=(6, 7, 4)))
        for r in range(6):
            for c in range(7):
                a = sample(m, c, r, True)
                b = sample(m, c, r, False)
                np.testing.assert_array_equal(a, b)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 4), st.floats(0, 3))
    def test_lipschitz(self, seed, x, y):
        data = np.random.default_rng(seed).normal(size=(4, 5, 2))
        m = fmap(data)
        eps = 1e-3
        a = sample(m, x, y, True)
        b = sample(m, min(x + eps, 4.0), y, True)
        spread = data.max() - data.min()
        assert np.all(np.abs(a - b) <= 2 * eps * spread + 1e-5)


class TestPooling:
    def test_dominates_input(self, rng):
        for _ in range(100):
            shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 4)))
            m = fmap(rng.normal(size=shape))
            assert np.all(pool_map(m).data >= m.data)

    def test_against_loop(self, rng):
        data = rng.normal(size=(5, 4, 2)).astype(np.float32)
        out = pool_map(fmap(data)).data
        for r in range(5):
            for c in range(4):
                rs = slice(max(r - 1, 0), min(r + 2, 5))
                cs = slice(max(c - 1, 0), min(c + 2, 4))
                np.testing.assert_array_equal(out[r, c], data[rs, cs].max(axis=(0, 1)))

    def test_radius(self):
        assert aggregation_radius(1.4) == pytest.approx(2.1, abs=1e-12)
        assert WorldConfig().cell_size == 1.4
        assert aggregation_radius(WorldConfig().cell_size) == pytest.approx(2.1, abs=1e-12)


class TestProbeScan:
    def test_selects_source(self, rng):
        low = fmap(rng.normal(size=(4, 4, 2)))
        high = fmap(rng.normal(size=(4, 4, 6)))
        scan = Scan("a", detections=(det_at(1.2, 2.3), det_at(0.1, 0.4)), feature_map_low=low, feature_map_high=high)
        out = probe_scan(scan, ProbeConfig("HighDim"))
        assert out.shape == (2, 6)
        np.testing.assert_array_equal(out[0], probe(high, (1.2, 2.3)))
        assert probe_scan(scan, ProbeConfig("LowDim", pool3x3=False)).shape == (2, 2)

    def test_missing_map(self):
        with pytest.raises(SchemaError):
            probe_scan(Scan("a", detections=(det_at(0, 0),)))
