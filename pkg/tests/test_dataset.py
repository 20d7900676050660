import numpy as np
import pytest

from pointdiff.dataset import (
    PipelineConfig,
    PipelineError,
    RegionTooSparseError,
    SceneSpec,
    build_map,
    dedup_voxels,
    generate_synthetic_scene,
    make_pair,
    scene_boxes,
    synthetic_pair,
)
from pointdiff.geometry import RigidPose, transform, voxelize
from pointdiff.metrics import chamfer_distance

I = RigidPose.identity()


def surface_distance(points, boxes):
    """Distance from each point to the nearest of: ground plane, any box surface."""
    d = np.abs(points[:, 2])
    for lo, hi in boxes:
        inside = np.clip(points, lo, hi)
        outside = np.linalg.norm(points - inside, axis=1)
        gap_in = np.min(np.concatenate([points - lo, hi - points], axis=1), axis=1)
        d = np.minimum(d, np.where(outside > 0, outside, np.abs(gap_in)))
    return d


class TestBuildMap:
    scan = np.random.default_rng(0).uniform(-5, 5, (40, 3))

    def test_single_identity_scan(self):
        np.testing.assert_array_equal(build_map([(self.scan, I)]), self.scan)

    def test_poses_applied(self):
        pose = RigidPose(np.eye(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(build_map([(self.scan, pose)]), self.scan + [1, 2, 3])

    def test_dedup_counts_each_voxel_once(self):
        cfg = PipelineConfig(dedup_resolution=0.2)
        world = build_map([(self.scan, I), (self.scan, I)], config=cfg)
        assert voxelize(world, 0.2).occupied == voxelize(self.scan, 0.2).occupied
        assert len(world) == len(voxelize(self.scan, 0.2))

    def test_all_moving_removed(self):
        labels = [np.full(40, 252)]
        assert len(build_map([(self.scan, I)], labels)) == 0

    def test_some_moving_removed(self):
        labels = np.zeros(40, dtype=np.int64)
        labels[:10] = 259
        np.testing.assert_array_equal(build_map([(self.scan, I)], [labels]), self.scan[10:])

    def test_label_mismatch(self):
        with pytest.raises(PipelineError):
            build_map([(self.scan, I)], [np.zeros(3)])

    def test_dedup_keeps_first(self):
        pts = np.array([[0.01, 0, 0], [0.02, 0, 0], [1, 1, 1]])
        np.testing.assert_array_equal(dedup_voxels(pts, 0.1), pts[[0, 2]])


class TestMakePair:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.scan = rng.uniform(-10, 10, (200, 3))
        world_local = np.tile(self.scan, (20, 1)) + rng.normal(0, 1e-3, (4000, 3))
        self.pose = RigidPose(np.eye(3), np.array([5.0, -3.0, 1.0]))
        self.world = transform(world_local, self.pose)
        self.cfg = PipelineConfig(range_m=50, n_input=100, n_gt=1000)

    def test_valid_pair(self):
        pair = make_pair(self.scan, self.pose, self.world, self.cfg, seed=1)
        assert pair.input.shape == (100, 3) and pair.gt.shape == (1000, 3)
        assert np.all(np.linalg.norm(pair.gt, axis=1) <= 50)
        assert np.all(np.linalg.norm(pair.input, axis=1) <= 50)
        # gt lives in the scan frame, hugging the scan
        assert chamfer_distance(pair.gt, self.scan) < 0.05

    def test_deterministic(self):
        a = make_pair(self.scan, self.pose, self.world, self.cfg, seed=3)
        b = make_pair(self.scan, self.pose, self.world, self.cfg, seed=3)
        np.testing.assert_array_equal(a.input, b.input)
        np.testing.assert_array_equal(a.gt, b.gt)

    def test_too_sparse(self):
        with pytest.raises(RegionTooSparseError):
            make_pair(self.scan, self.pose, self.world, PipelineConfig(n_input=100, n_gt=5000))
        with pytest.raises(RegionTooSparseError):
            make_pair(self.scan, self.pose, self.world, PipelineConfig(n_input=300, n_gt=1000))


class TestSynthetic:
    def test_plane_only(self):
        gt, scan = generate_synthetic_scene(SceneSpec(n_boxes=0, n_gt=500), seed=0)
        assert len(gt) == 500
        np.testing.assert_array_equal(gt[:, 2], 0)
        np.testing.assert_allclose(scan[:, 2], 0, atol=1e-9)

    def test_reproducible_and_on_surfaces(self):
        spec = SceneSpec(n_boxes=2, n_gt=1500)
        gt, scan = generate_synthetic_scene(spec, seed=4)
        gt2, scan2 = generate_synthetic_scene(spec, seed=4)
        np.testing.assert_array_equal(gt, gt2)
        np.testing.assert_array_equal(scan, scan2)
        boxes = scene_boxes(spec, 4)
        assert surface_distance(scan, boxes).max() < 1e-9
        assert surface_distance(gt, boxes).max() < 1e-9

    def test_scan_is_farther_than_gt_from_itself(self):
        spec = SceneSpec(n_gt=2000)
        gt, scan = generate_synthetic_scene(spec, seed=1)
        assert chamfer_distance(scan, gt) > 0
        assert chamfer_distance(gt, gt) == 0

    def test_fps_scan_mode(self):
        gt, scan = generate_synthetic_scene(SceneSpec(scan_mode="fps", n_scan=100, n_gt=500), seed=0)
        assert len(scan) == 100 and {tuple(p) for p in scan} <= {tuple(p) for p in gt}

    def test_pair_in_sensor_frame(self):
        spec = SceneSpec(n_gt=2000)
        pair = synthetic_pair(spec, 2, PipelineConfig(n_input=150, n_gt=1500))
        # the sensor sits above the ground, so the ground lies below the local origin
        assert np.min(pair.gt[:, 2]) == pytest.approx(-spec.sensor_height)

    def test_invalid_spec(self):
        with pytest.raises(PipelineError):
            generate_synthetic_scene(SceneSpec(scan_mode="laser"))
