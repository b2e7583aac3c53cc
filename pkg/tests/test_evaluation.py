import time

import numpy as np
import pytest

from lunarsplat.classes import LANDER, REGOLITH, ROCK
from lunarsplat.errors import EmptyDomainError, InvalidInputError
from lunarsplat.evaluation import (
    LabeledCloud,
    build_baseline_cloud,
    crop_to_observed,
    depth_metrics,
    extract_point_cloud,
    height_error,
    sample_scene_surface,
    seg_metrics,
    surface_metrics,
    surface_report,
    timing,
)
from lunarsplat.losses import LossWeights
from lunarsplat.mapping import GaussianMap, MappingConfig, VoxelIndex, fuse_frame
from lunarsplat.scene_core import logit


class TestDepthMetrics:
    def test_perfect(self):
        d = np.random.default_rng(0).uniform(1, 10, size=(8, 8))
        r = depth_metrics(d, d.copy(), np.ones((8, 8), dtype=bool))
        assert (r.mae, r.absrel, r.delta25) == (0.0, 0.0, 1.0)

    def test_boundary_ratio_strict(self):
        r = depth_metrics(np.array([[5.0]]), np.array([[4.0]]), np.array([[True]]))
        assert r.mae == pytest.approx(1.0)
        assert r.absrel == pytest.approx(0.25)
        assert r.delta25 == 0.0  # ratio exactly 1.25 fails the strict test

    def test_uniform_scale(self):
        d = np.random.default_rng(1).uniform(1, 10, size=(8, 8))
        r = depth_metrics(1.2 * d, d, np.ones((8, 8), dtype=bool))
        assert r.absrel == pytest.approx(0.2, abs=1e-12)
        assert r.delta25 == 1.0

    def test_max_depth_cut(self):
        gt = np.array([[5.0, 30.0]])
        pred = np.array([[6.0, 100.0]])
        r = depth_metrics(pred, gt, np.ones((1, 2), dtype=bool), max_depth=20.0)
        assert r.mae == pytest.approx(1.0)

    def test_empty_domain(self):
        with pytest.raises(EmptyDomainError):
            depth_metrics(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))


class TestSegMetrics:
    def test_perfect(self):
        gt = np.random.default_rng(0).integers(0, 6, size=(16, 16))
        r = seg_metrics(gt, gt)
        assert all(v == 1.0 for v in r.iou.values())
        assert all(v == 1.0 for v in r.acc.values())

    def test_half_half_hand_computed(self):
        # pred all class 0; gt half class 0, half class 1
        gt = np.zeros(100, dtype=int)
        gt[50:] = 1
        pred = np.zeros(100, dtype=int)
        r = seg_metrics(pred, gt)
        assert r.iou["regolith"] == pytest.approx(0.5)
        assert r.iou["rock"] == 0.0
        assert r.acc["regolith"] == pytest.approx(0.5)
        assert r.acc["rock"] == pytest.approx(0.5)

    def test_absent_class_skipped(self):
        gt = np.zeros(10, dtype=int)
        r = seg_metrics(gt, gt)
        assert set(r.iou) == {"regolith"}
        assert r.mean_iou == 1.0


class TestExtractPointCloud:
    def _map(self, opacities):
        gmap = GaussianMap(MappingConfig())
        n = len(opacities)
        gmap.append(np.arange(3 * n, dtype=float).reshape(n, 3), np.zeros((n, 3)),
                    np.tile([1.0, 0, 0, 0], (n, 1)),
                    np.array([float(logit(o)) for o in opacities]),
                    np.zeros((n, 3)), np.arange(n).astype(np.uint8) % 6)
        return gmap

    def test_threshold_zero_keeps_all(self):
        gmap = self._map([0.1, 0.5, 0.9])
        assert len(extract_point_cloud(gmap, 0.0)) == 3

    def test_threshold_one_empty(self):
        gmap = self._map([0.1, 0.5, 0.999])
        assert len(extract_point_cloud(gmap, 1.0)) == 0

    def test_labels_preserved(self):
        gmap = self._map([0.9, 0.9])
        cloud = extract_point_cloud(gmap, 0.5)
        np.testing.assert_array_equal(cloud.labels, gmap.arrays.labels)


def brute_force_nn(src, dst):
    diff = src[:, None, :] - dst[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2)).min(axis=1)


class TestSurfaceMetrics:
    def test_identical_clouds(self):
        pts = np.random.default_rng(0).uniform(size=(100, 3))
        cloud = LabeledCloud(pts, np.zeros(100, dtype=np.uint8))
        row = surface_metrics(cloud, cloud, 0.05, with_height=False)
        assert row.accuracy_cm == 0.0 and row.completeness_cm == 0.0
        assert row.precision_pct == 100.0 and row.recall_pct == 100.0
        assert row.f1_pct == pytest.approx(100.0)

    def test_hand_computed_example(self):
        recon = LabeledCloud(np.array([[0.0, 0.0, 0.0]]), np.zeros(1, dtype=np.uint8))
        gt = LabeledCloud(np.array([[0.0, 0.0, 0.03], [0.0, 0.0, 1.0]]),
                          np.zeros(2, dtype=np.uint8))
        row = surface_metrics(recon, gt, 0.05, with_height=False)
        assert row.accuracy_cm == pytest.approx(3.0, abs=1e-9)
        assert row.completeness_cm == pytest.approx(51.5, abs=1e-9)
        assert row.precision_pct == 100.0
        assert row.recall_pct == 50.0
        assert row.f1_pct == pytest.approx(200.0 / 3.0, abs=1e-9)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(3)
        a = LabeledCloud(rng.uniform(size=(40, 3)), np.zeros(40, dtype=np.uint8))
        b = LabeledCloud(rng.uniform(size=(60, 3)), np.zeros(60, dtype=np.uint8))
        ab = surface_metrics(a, b, 0.1, with_height=False)
        ba = surface_metrics(b, a, 0.1, with_height=False)
        assert ab.accuracy_cm == ba.completeness_cm
        assert ab.precision_pct == ba.recall_pct

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n, m = rng.integers(5, 500), rng.integers(5, 500)
            a = rng.uniform(-2, 2, size=(n, 3))
            b = rng.uniform(-2, 2, size=(m, 3))
            ca = LabeledCloud(a, np.zeros(n, dtype=np.uint8))
            cb = LabeledCloud(b, np.zeros(m, dtype=np.uint8))
            row = surface_metrics(ca, cb, 0.3, with_height=False)
            fwd = brute_force_nn(a, b)
            bwd = brute_force_nn(b, a)
            assert row.accuracy_cm == float(fwd.mean() * 100)
            assert row.completeness_cm == float(bwd.mean() * 100)
            assert row.precision_pct == float(np.mean(fwd < 0.3) * 100)
            assert row.recall_pct == float(np.mean(bwd < 0.3) * 100)

    def test_precision_recall_monotone_in_threshold(self):
        rng = np.random.default_rng(5)
        a = LabeledCloud(rng.uniform(size=(200, 3)), np.zeros(200, dtype=np.uint8))
        b = LabeledCloud(rng.uniform(size=(200, 3)), np.zeros(200, dtype=np.uint8))
        prev_p, prev_r = -1.0, -1.0
        for d in (0.01, 0.05, 0.1, 0.3, 1.0):
            row = surface_metrics(a, b, d, with_height=False)
            assert row.precision_pct >= prev_p and row.recall_pct >= prev_r
            prev_p, prev_r = row.precision_pct, row.recall_pct

    def test_superset_accuracy_zero(self):
        rng = np.random.default_rng(6)
        base = rng.uniform(size=(50, 3))
        sup = np.concatenate([base, rng.uniform(size=(30, 3))])
        a = LabeledCloud(base, np.zeros(50, dtype=np.uint8))
        b = LabeledCloud(sup, np.zeros(80, dtype=np.uint8))
        assert surface_metrics(a, b, 0.05, with_height=False).accuracy_cm == 0.0

    def test_rigid_invariance(self):
        rng = np.random.default_rng(7)
        from lunarsplat.scene_core import quat_to_rotation
        R = quat_to_rotation(rng.normal(size=4))
        t = rng.normal(size=3)
        a = rng.uniform(size=(80, 3))
        b = rng.uniform(size=(90, 3))
        row1 = surface_metrics(LabeledCloud(a, np.zeros(80, dtype=np.uint8)),
                               LabeledCloud(b, np.zeros(90, dtype=np.uint8)),
                               0.1, with_height=False)
        row2 = surface_metrics(LabeledCloud(a @ R.T + t, np.zeros(80, dtype=np.uint8)),
                               LabeledCloud(b @ R.T + t, np.zeros(90, dtype=np.uint8)),
                               0.1, with_height=False)
        assert row1.accuracy_cm == pytest.approx(row2.accuracy_cm, abs=1e-7)
        assert row1.completeness_cm == pytest.approx(row2.completeness_cm, abs=1e-7)

    def test_empty_cloud_rejected(self):
        a = LabeledCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))
        b = LabeledCloud(np.zeros((1, 3)), np.zeros(1, dtype=np.uint8))
        with pytest.raises(EmptyDomainError):
            surface_metrics(a, b, 0.05)


def height_error_oracle(recon_pts, gt_pts, cell):
    """Independent dict-based reimplementation of the grid comparison."""

    def table(pts):
        cells = {}
        for p in pts:
            key = (int(np.floor(p[0] / cell)), int(np.floor(p[1] / cell)))
            cells.setdefault(key, []).append(p[2])
        out = {}
        for key, zs in cells.items():
            zs = sorted(zs, reverse=True)
            k = max(1, int(np.ceil(len(zs) / 10)))
            out[key] = float(np.mean(zs[:k]))
        return out

    tr, tg = table(recon_pts), table(gt_pts)
    common = sorted(set(tr) & set(tg))
    if not common:
        return None
    return float(np.mean([abs(tr[k] - tg[k]) for k in common]) * 100.0)


class TestHeightError:
    def test_identical_zero(self):
        pts = np.random.default_rng(0).uniform(-1, 1, size=(300, 3))
        cloud = LabeledCloud(pts, np.zeros(300, dtype=np.uint8))
        assert height_error(cloud, cloud, 0.05) == 0.0

    def test_offset_planes(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, 1, size=(5000, 2))
        a = np.column_stack([xy, np.zeros(5000)])
        b = np.column_stack([xy, np.full(5000, 0.02)])
        got = height_error(LabeledCloud(a, np.zeros(5000, dtype=np.uint8)),
                           LabeledCloud(b, np.zeros(5000, dtype=np.uint8)), 0.05)
        assert got == pytest.approx(2.0, abs=1e-9)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.uniform(-1, 1, size=(rng.integers(20, 300), 3))
            b = rng.uniform(-1, 1, size=(rng.integers(20, 300), 3))
            ca = LabeledCloud(a, np.zeros(len(a), dtype=np.uint8))
            cb = LabeledCloud(b, np.zeros(len(b), dtype=np.uint8))
            expected = height_error_oracle(a, b, 0.25)
            if expected is None:
                with pytest.raises(EmptyDomainError):
                    height_error(ca, cb, 0.25)
            else:
                assert height_error(ca, cb, 0.25) == pytest.approx(expected, abs=1e-9)

    def test_disjoint_cells_error(self):
        a = LabeledCloud(np.zeros((1, 3)), np.zeros(1, dtype=np.uint8))
        b = LabeledCloud(np.full((1, 3), 10.0), np.zeros(1, dtype=np.uint8))
        with pytest.raises(EmptyDomainError):
            height_error(a, b, 0.05)


class TestSurfaceReport:
    def test_per_class_rows_and_all(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(size=(200, 3))
        labels = np.concatenate([np.full(100, REGOLITH), np.full(100, ROCK)]).astype(np.uint8)
        cloud = LabeledCloud(pts, labels)
        rows = surface_report(cloud, cloud, 0.05)
        assert set(rows) == {"regolith", "rock", "all"}
        assert rows["all"].f1_pct == pytest.approx(100.0)

    def test_class_missing_from_one_side_skipped(self):
        rng = np.random.default_rng(4)
        a = LabeledCloud(rng.uniform(size=(50, 3)), np.full(50, REGOLITH, dtype=np.uint8))
        labels_b = np.concatenate([np.full(40, REGOLITH), np.full(10, LANDER)]).astype(np.uint8)
        b = LabeledCloud(rng.uniform(size=(50, 3)), labels_b)
        rows = surface_report(a, b, 0.1)
        assert "lander" not in rows and "regolith" in rows


class TestBaselineCloud:
    def test_single_frame_equals_fuse_filter(self):
        import sys
        sys.path.insert(0, "tests")
        from test_mapping import ListDataset, small_dataset
        _, frames = small_dataset(n_frames=1)
        cfg = MappingConfig(voxel_size=0.1)
        weights = LossWeights()
        cloud = build_baseline_cloud(ListDataset(frames), cfg, weights)
        index = VoxelIndex(0.1)
        pts, cols, labs = fuse_frame(frames[0], weights.depth_range)
        novel = index.claim(pts)
        np.testing.assert_array_equal(cloud.points, pts[novel])
        np.testing.assert_array_equal(cloud.labels, labs[novel])

    def test_deterministic_and_voxel_unique(self):
        import sys
        sys.path.insert(0, "tests")
        from test_mapping import ListDataset, small_dataset
        _, frames = small_dataset(n_frames=3)
        cfg = MappingConfig(voxel_size=0.1)
        c1 = build_baseline_cloud(ListDataset(frames), cfg, LossWeights())
        c2 = build_baseline_cloud(ListDataset(frames), cfg, LossWeights())
        np.testing.assert_array_equal(c1.points, c2.points)
        keys = VoxelIndex(0.1).keys_for(c1.points)
        assert np.unique(keys).size == keys.size


class TestTiming:
    def test_sleeping_stage(self):
        fps = timing(lambda: time.sleep(0.05), repeats=10)
        assert 16 <= fps <= 24

    def test_zero_repeats_rejected(self):
        with pytest.raises(InvalidInputError):
            timing(lambda: None, repeats=0)


class TestSceneSurface:
    def test_flat_scene_sampling(self):
        from lunarsplat.synthsim import SceneConfig, generate_scene
        cfg = SceneConfig(x_min=0, x_max=2, y_min=0, y_max=2, cell=0.5,
                          base_amplitude=0.0, noise_amplitude=0.0,
                          crater_count=0, rock_count=0)
        scene = generate_scene(cfg, seed=0)
        cloud = sample_scene_surface(scene, resolution=0.1)
        assert (cloud.labels == REGOLITH).all()
        np.testing.assert_allclose(cloud.points[:, 2], 0.0, atol=1e-12)
        assert len(cloud) == 21 * 21

    def test_rock_samples_labeled(self):
        from lunarsplat.synthsim import SceneConfig, generate_scene
        cfg = SceneConfig(x_min=-3, x_max=3, y_min=-3, y_max=3, cell=0.25,
                          base_amplitude=0.0, noise_amplitude=0.0, crater_count=0,
                          rock_count=2, rock_radius_min=0.3, rock_radius_max=0.5)
        scene = generate_scene(cfg, seed=1)
        cloud = sample_scene_surface(scene, resolution=0.05)
        assert (cloud.labels == ROCK).sum() > 50
        # rock samples sit above the flat ground
        rocks = cloud.points[cloud.labels == ROCK]
        assert rocks[:, 2].max() > 0.1

    def test_crop_to_observed(self):
        import sys
        sys.path.insert(0, "tests")
        from test_mapping import small_dataset
        scene, frames = small_dataset(n_frames=3)
        cloud = sample_scene_surface(scene, resolution=0.1)
        cropped = crop_to_observed(cloud, frames, (0.3, 20.0), tol=0.1)
        assert 0 < len(cropped) < len(cloud)
        # every kept point projects into at least one frame's valid region
        frame = frames[0]
