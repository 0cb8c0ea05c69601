import itertools
import math

import numpy as np
import pytest

from ood3d import kernels
from ood3d.errors import ConfigError, NoFreeSpace, NoMemberPoints, ParseError, TooFewEligible
from ood3d.forge import (
    ForgeConfig,
    Mesh,
    default_mesh_bank,
    forge_gaussian,
    forge_inject,
    forge_pointmixup,
    forge_resize,
    forge_topk,
    grid_sample,
    match_point_sets,
    mix_point_sets,
    normalize_unit,
    read_off,
    resize_object,
    sample_resize_factors,
    sample_surface,
    topk_indices,
    write_off,
)
from ood3d.forge.meshes import box_mesh
from ood3d.head import HeadInput
from ood3d.model import Box3D, FeatureMap, GroundTruthObject, PointCloud, Scan, box_overlap_3d, points_in_box

from conftest import det_at, gt_at


def corners_2d(box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = []
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        x, y = sx * box.l / 2, sy * box.w / 2
        out.append((box.cx + c * x - s * y, box.cy + s * x + c * y))
    return out


def sat_overlaps(a, b, tol=1e-9):
    """Positive-volume overlap by the separating axis theorem; independent of box_overlap_3d."""
    if min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2) <= tol:
        return False
    pa, pb = corners_2d(a), corners_2d(b)
    for poly in (pa, pb):
        for k in range(4):
            (x0, y0), (x1, y1) = poly[k], poly[(k + 1) % 4]
            nx, ny = y1 - y0, x0 - x1
            norm = math.hypot(nx, ny)
            pra = [(nx * x + ny * y) / norm for x, y in pa]
            prb = [(nx * x + ny * y) / norm for x, y in pb]
            if min(max(pra), max(prb)) - max(min(pra), min(prb)) <= tol:
                return False
    return True


def object_scan(rng, n_obj=4, n_pts=30, background=20):
    """Known objects with member points spread inside their boxes."""
    parts = [np.c_[rng.uniform(-40, 40, (background, 2)), np.zeros(background), rng.random(background)]]
    gts = []
    start = background
    for k in range(n_obj):
        box = Box3D(10.0 * k - 15, rng.uniform(-5, 5), 0.8, *rng.uniform(1, 4, 3), rng.uniform(-math.pi, math.pi))
        local = rng.uniform(-0.45, 0.45, (n_pts, 3)) * box.dims
        parts.append(np.c_[box.to_world(local), rng.random(n_pts)])
        gts.append(GroundTruthObject(box, int(rng.integers(0, 3)), False, np.arange(start, start + n_pts)))
        start += n_pts
    return Scan("objs", PointCloud(np.concatenate(parts)), tuple(gts))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ForgeConfig(mix_range=(0.7, 0.3))
        with pytest.raises(ConfigError):
            ForgeConfig(mix_prob=1.5)
        with pytest.raises(ConfigError):
            ForgeConfig(resize_axis_range=(0.9, 1.1))
        with pytest.raises(ConfigError):
            ForgeConfig(method="Dreaming")


class TestGaussian:
    def test_empty(self):
        assert forge_gaussian([]) == []

    def test_layout(self, rng):
        inputs = [HeadInput(rng.normal(size=10), 0, 4), HeadInput(rng.normal(size=10), 1, 4)]
        out = forge_gaussian(inputs)
        assert len(out) == 3 and out[:2] == inputs
        assert out[2].y == 1
        np.testing.assert_array_equal(out[2].x[4:], inputs[0].x[4:])
        assert not np.array_equal(out[2].x[:4], inputs[0].x[:4])

    def test_deterministic(self, rng):
        inputs = [HeadInput(rng.normal(size=10), 0, 6) for _ in range(5)]
        a = forge_gaussian(inputs, ForgeConfig(rng_seed=4))
        b = forge_gaussian(inputs, ForgeConfig(rng_seed=4))
        assert all(np.array_equal(p.x, q.x) for p, q in zip(a, b))

    def test_law_of_large_numbers(self):
        n = 10_000
        inputs = [HeadInput(np.zeros(8), 0, 5) for _ in range(n)]
        noise = np.stack([h.x[:5] for h in forge_gaussian(inputs)[n:]])
        assert np.all(np.abs(noise.mean(axis=0)) < 3 / math.sqrt(n))
        assert np.all(np.abs(noise.var(axis=0) - 1) < 0.05)


class TestResize:
    def test_identity_factors(self, rng):
        scan = object_scan(rng)
        out = resize_object(scan, 1, (1, 1, 1))
        np.testing.assert_allclose(out.cloud.points, scan.cloud.points, atol=1e-5)
        assert out.ground_truth[1].box == scan.ground_truth[1].box

    def test_double_length(self, rng):
        scan = object_scan(rng)
        out = resize_object(scan, 2, (2, 1, 1))
        old, new = scan.ground_truth[2], out.ground_truth[2]
        assert new.box.l == 2 * old.box.l and new.box.w == old.box.w and new.box.h == old.box.h
        assert new.is_open and new.forged == "resize"
        inside = set(points_in_box(out.cloud, new.box).tolist())
        assert set(new.point_indices.tolist()) <= inside

    def test_factor_range(self, rng):
        f = sample_resize_factors(rng, ForgeConfig(), 20_000)
        assert f.min() >= 0.5 and f.max() <= 2.0
        assert not np.any((f > 0.9) & (f < 1.1))

    def test_forge_resize(self, rng):
        scan = object_scan(rng, n_obj=6)
        cfg = ForgeConfig(method="Resizing", rng_seed=9, resize_prob=1.0)
        out = forge_resize(scan, cfg)
        assert out == forge_resize(scan, cfg)
        assert all(g.forged == "resize" for g in out.ground_truth)
        # background points untouched
        np.testing.assert_array_equal(out.cloud.points[:20], scan.cloud.points[:20])

    def test_no_member_points(self):
        scan = Scan("a", ground_truth=(gt_at(0, 0),))
        with pytest.raises(NoMemberPoints):
            forge_resize(scan)
        with pytest.raises(NoMemberPoints):
            resize_object(scan, 0, (2, 1, 1))

    def test_objects_without_points_untouched(self, rng):
        scan = object_scan(rng, n_obj=2)
        scan = Scan(scan.scan_id, scan.cloud, scan.ground_truth + (gt_at(30, 30),))
        out = forge_resize(scan, ForgeConfig(resize_prob=1.0))
        assert out.ground_truth[2] == scan.ground_truth[2]


class TestMixup:
    def test_endpoints(self, rng):
        for _ in range(20):
            a = rng.normal(size=(int(rng.integers(3, 30)), 4))
            b = rng.normal(size=(len(a), 4))
            perm = rng.permutation(len(a))
            r0 = mix_point_sets(a, b[perm], 0.0, rng)
            r1 = mix_point_sets(a, b[perm], 1.0, rng)
            np.testing.assert_allclose(np.sort(r0, axis=0), np.sort(a, axis=0), atol=1e-9)
            np.testing.assert_allclose(np.sort(r1, axis=0), np.sort(b, axis=0), atol=1e-9)

    def test_unequal_sizes_subsample(self, rng):
        a = rng.normal(size=(40, 4))
        b = rng.normal(size=(7, 4))
        assert mix_point_sets(a, b, 0.5, rng).shape == (7, 4)
        r0 = mix_point_sets(a, b, 0.0, rng)
        assert all(any(np.allclose(p, q) for q in a) for p in r0)

    def test_three_point_bruteforce(self, rng):
        for _ in range(50):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(3, 4))
            cost = lambda p: sum(((a[i, :3] - b[p[i], :3]) ** 2).sum() for i in range(3))
            best = min(itertools.permutations(range(3)), key=cost)
            sigma = match_point_sets(a, b)
            assert cost(tuple(sigma)) == pytest.approx(cost(best), abs=1e-12)
            lam = 0.37
            out = mix_point_sets(a, b, lam, rng)
            np.testing.assert_allclose(out, (1 - lam) * a + lam * b[list(sigma)], atol=1e-12)

    def test_large_sets_use_greedy(self, rng):
        a = rng.normal(size=(200, 3))
        sigma = match_point_sets(a, a[::-1])
        assert sorted(sigma) == list(range(200))
        np.testing.assert_array_equal(sigma, np.arange(199, -1, -1))

    def test_forge_pointmixup(self, rng):
        scan = object_scan(rng, n_obj=5)
        cfg = ForgeConfig(method="PointMixup", mix_prob=1.0, rng_seed=2)
        out = forge_pointmixup(scan, cfg)
        assert out == forge_pointmixup(scan, cfg)
        for g in out.ground_truth:
            assert g.forged == "mixup" and g.is_open
            (_, w0), (_, w1) = g.mix
            assert 0.3 <= w1 <= 0.7 and w0 + w1 == pytest.approx(1.0)
            assert g.point_indices.size == 30
        assert len(out.cloud) == len(scan.cloud)

    def test_forced_lambda_zero_keeps_geometry(self, rng):
        scan = object_scan(rng, n_obj=3)
        out = forge_pointmixup(scan, ForgeConfig(mix_prob=1.0), lam=0.0)
        for g_old, g_new in zip(scan.ground_truth, out.ground_truth):
            a = np.sort(scan.cloud.points[g_old.point_indices], axis=0)
            b = np.sort(out.cloud.points[g_new.point_indices], axis=0)
            np.testing.assert_allclose(a, b, atol=1e-4)

    def test_too_few(self, rng):
        scan = object_scan(rng, n_obj=1)
        with pytest.raises(TooFewEligible):
            forge_pointmixup(scan)
        sparse = object_scan(rng, n_obj=3, n_pts=4)
        with pytest.raises(TooFewEligible):
            forge_pointmixup(sparse)


class TestInject:
    def test_cube_surface(self, rng):
        pts = sample_surface(normalize_unit(box_mesh()), 2000, rng)
        dist = np.min(np.abs(np.abs(pts) - 0.5), axis=1)
        assert np.all(dist < 1e-9)

    def test_grid_keep_one(self, rng):
        for _ in range(20):
            pts = sample_surface(normalize_unit(box_mesh((1, 0.6, 0.3))), 300, rng)
            cells = int(rng.integers(5, 11))
            kept = grid_sample(pts, cells, 1, rng)
            ids = kernels.voxel_ids(pts[kept], cells)
            assert len(set(ids.tolist())) == len(kept)
            assert len(kept) == len(set(kernels.voxel_ids(pts, cells).tolist()))

    def test_grid_keep_bounds(self, rng):
        for _ in range(20):
            pts = sample_surface(normalize_unit(box_mesh()), 300, rng)
            cells, keep = int(rng.integers(5, 11)), int(rng.integers(1, 4))
            kept = grid_sample(pts, cells, keep, rng)
            counts = np.bincount(kernels.voxel_ids(pts[kept], cells))
            full = np.bincount(kernels.voxel_ids(pts, cells))
            assert np.array_equal(counts, np.minimum(full, keep))

    def test_forge_inject(self, rng, manifest):
        gts = tuple(gt_at(x, y, dims=(4, 2, 1.5)) for x, y in rng.uniform(-30, 30, (10, 2)))
        scan = Scan("inj", PointCloud(np.c_[rng.uniform(-50, 50, (100, 3)), rng.random(100)]), gts)
        cfg = ForgeConfig(method="MeshInjection", rng_seed=5)
        out = forge_inject(scan, default_mesh_bank(), manifest, cfg)
        assert out == forge_inject(scan, default_mesh_bank(), manifest, cfg)
        new = out.ground_truth[len(gts):]
        assert 15 <= len(new) <= 25
        for k, g in enumerate(new):
            assert g.class_id == -1 and g.is_open and g.forged.startswith("inject:")
            assert 1 <= g.point_indices.size <= 200
            for other in out.ground_truth[:len(gts) + k]:
                assert box_overlap_3d(g.box, other.box) == 0.0
                assert not sat_overlaps(g.box, other.box)
            assert g.box.cz == pytest.approx(g.box.h / 2)
        assert np.all(out.cloud.points[:, 3] >= 0)

    def test_no_free_space(self, manifest):
        fmap = FeatureMap(np.zeros((3, 3, 1)), (0.0, 0.0), 1.0)
        scan = Scan("tiny", feature_map_low=fmap)
        with pytest.raises(NoFreeSpace):
            forge_inject(scan, default_mesh_bank(), manifest, ForgeConfig(scale_range=(4.0, 4.0)))


class TestOff:
    def test_roundtrip(self, tmp_path):
        for name, mesh in default_mesh_bank().items():
            back = read_off(write_off(mesh, tmp_path / f"{name}.off"))
            np.testing.assert_array_equal(back.vertices, mesh.vertices)
            np.testing.assert_array_equal(back.faces, mesh.faces)

    def test_fused_header_and_quads(self, tmp_path):
        p = tmp_path / "q.off"
        p.write_text("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
        mesh = read_off(p)
        assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_errors_have_lines(self, tmp_path):
        p = tmp_path / "bad.off"
        p.write_text("OFF\n3 1 0\n0 0 0\n1 0 x\n0 1 0\n3 0 1 2\n")
        with pytest.raises(ParseError) as info:
            read_off(p)
        assert info.value.line == 4
        p.write_text("PLY\n")
        with pytest.raises(ParseError):
            read_off(p)


def random_topk_scan(rng, name="t"):
    dets = [det_at(*rng.uniform(-8, 8, 2), score=float(rng.integers(1, 20)) / 20, dims=tuple(rng.uniform(0.5, 3, 3)),
                   embedding=np.zeros(2))
            for _ in range(int(rng.integers(0, 12)))]
    gts = [gt_at(*rng.uniform(-8, 8, 2), is_open=bool(rng.random() < 0.3), dims=tuple(rng.uniform(0.5, 3, 3)))
           for _ in range(int(rng.integers(0, 6)))]
    return Scan(name, detections=tuple(dets), ground_truth=tuple(gts))


class TestTopK:
    def test_all_overlap(self):
        scan = Scan("a", detections=(det_at(0, 0), det_at(0.2, 0)), ground_truth=(gt_at(0, 0),))
        assert topk_indices(scan, 5) == []

    def test_top_five(self, rng):
        scores = rng.permutation(8) / 10 + 0.05
        dets = tuple(det_at(10.0 * k, 0, score=float(s)) for k, s in enumerate(scores))
        scan = Scan("a", detections=dets, ground_truth=(gt_at(0, 50),))
        assert set(topk_indices(scan, 5)) == set(np.argsort(-scores)[:5].tolist())

    def test_tie_at_k(self):
        scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.5, 0.5, 0.1]
        dets = tuple(det_at(10.0 * k, 0, score=s) for k, s in enumerate(scores))
        picked = topk_indices(Scan("a", detections=dets), 5)
        assert picked == [0, 1, 2, 3, 4]

    def test_zero_overlap_invariant(self, rng):
        for t in range(1000):
            scan = random_topk_scan(rng, f"s{t}")
            known = [g.box for g in scan.ground_truth if not g.is_open]
            for i in topk_indices(scan, 5):
                for g in known:
                    assert not sat_overlaps(scan.detections[i].box, g)

    def test_forge_topk_labels(self):
        dets = (det_at(0, 0, score=0.9, embedding=[1, 1]), det_at(20, 0, score=0.8, embedding=[2, 2]),
                det_at(40, 0, score=0.7, embedding=[3, 3]))
        scan = Scan("a", detections=dets, ground_truth=(gt_at(0, 0), gt_at(40, 0, is_open=True)))
        out = forge_topk(scan, ForgeConfig(topk_k=5))
        labels = {h.provenance.split("#")[1]: h.y for h in out}
        # det 0 matches known GT; dets 1 and 2 overlap no known box
        assert labels == {"0": 0, "1": 1, "2": 1}
        assert sum(h.y for h in forge_topk(scan, ForgeConfig(topk_k=1))) == 1
