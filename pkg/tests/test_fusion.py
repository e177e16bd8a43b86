"""Point-cloud stitching and windowed depth averaging."""

import numpy as np
import pytest
from scipy.spatial import cKDTree

from colde.fusion import (
    FusionError,
    PointCloud,
    backproject_depth,
    fuse_pointcloud,
    surface_residual_fraction,
    voxel_downsample,
    windowed_depth_average,
)
from colde.geometry import Intrinsics, PoseSE3
from colde.io import read_ply, write_ply
from colde.refine import perturb_depth
from colde.synthcolon import default_scene, render_sequence


@pytest.fixture(scope="module")
def seven_frames():
    return render_sequence(default_scene(7, width=96, height=72))


def rmse(a, b, m):
    return float(np.sqrt(np.mean((a[m] - b[m]) ** 2)))


class TestFusePointcloud:
    def test_single_frame_is_backprojection(self):
        K = Intrinsics.centered(5, 4, 3.0)
        D = np.arange(1.0, 21.0).reshape(4, 5)
        cloud = fuse_pointcloud([(D, None, PoseSE3.identity())], K)
        expected = np.array(
            [[D[i, j] * (j - K.cx) / K.fx, D[i, j] * (i - K.cy) / K.fy, D[i, j]] for i in range(4) for j in range(5)]
        )
        np.testing.assert_allclose(cloud.points, expected, atol=1e-15)
        assert np.all(cloud.colors == 1.0)

    def test_pose_applied(self):
        K = Intrinsics.centered(3, 3, 2.0)
        T = PoseSE3.from_rotation([0.1, -0.2, 0.3], [1.0, 2.0, 3.0])
        D = np.full((3, 3), 2.0)
        cloud = fuse_pointcloud([(D, None, T)], K)
        P = backproject_depth(D, K).reshape(-1, 3)
        np.testing.assert_allclose(cloud.points, P @ T.rotation.T + T.translation, atol=1e-14)

    def test_empty_masks_give_empty_cloud(self):
        K = Intrinsics.centered(4, 4, 3.0)
        frames = [(np.ones((4, 4)), None, PoseSE3.identity())] * 2
        cloud = fuse_pointcloud(frames, K, valid=[np.zeros((4, 4), bool)] * 2)
        assert len(cloud) == 0 and cloud.points.shape == (0, 3)

    def test_order_frame_then_row_major(self):
        K = Intrinsics.centered(2, 2, 1.0)
        frames = [(np.full((2, 2), 1.0), None, PoseSE3.identity()), (np.full((2, 2), 2.0), None, PoseSE3.identity())]
        z = fuse_pointcloud(frames, K).points[:, 2]
        np.testing.assert_array_equal(z, [1, 1, 1, 1, 2, 2, 2, 2])

    def test_colours_from_images(self):
        K = Intrinsics.centered(2, 2, 1.0)
        img = np.zeros((3, 2, 2))
        img[0, 0, 1] = 1.0
        cloud = fuse_pointcloud([(np.ones((2, 2)), img, PoseSE3.identity())], K)
        np.testing.assert_array_equal(cloud.colors[1], [1, 0, 0])

    def test_shape_mismatch(self):
        with pytest.raises(FusionError):
            fuse_pointcloud([(np.ones((3, 3)), None, PoseSE3.identity())], Intrinsics.centered(4, 3, 2.0))

    def test_ground_truth_frames_overlap(self):
        # default resolution: the nearest-neighbour distance is bounded by pixel footprint
        seq = render_sequence(default_scene(2))
        K = seq.intrinsics
        a, b = seq.frames
        ca = fuse_pointcloud([(a.gt_depth, a.image, a.pose_world)], K, valid=[a.valid])
        cb = fuse_pointcloud([(b.gt_depth, b.image, b.pose_world)], K, valid=[b.valid])
        dist, _ = cKDTree(cb.points).query(ca.points)
        overlap = dist < 0.1
        assert overlap.mean() > 0.5
        assert np.median(dist[overlap]) < 0.01

    def test_ground_truth_cloud_on_surface(self, seven_frames):
        K = seven_frames.intrinsics
        frames = [(f.gt_depth, f.image, f.pose_world) for f in seven_frames.frames]
        cloud = fuse_pointcloud(frames, K, valid=[f.valid for f in seven_frames.frames])
        assert surface_residual_fraction(cloud, seven_frames.config) >= 0.99


class TestVoxel:
    def test_averages_per_voxel(self):
        cloud = PointCloud(np.array([[0.01, 0.01, 0.01], [0.03, 0.01, 0.01], [0.5, 0.5, 0.5]]), np.ones((3, 3)))
        out = voxel_downsample(cloud, 0.1)
        assert len(out) == 2
        np.testing.assert_allclose(out.points[0], [0.02, 0.01, 0.01])

    def test_invalid_size(self):
        with pytest.raises(FusionError):
            voxel_downsample(PointCloud(np.zeros((1, 3)), np.zeros((1, 3))), 0.0)


class TestWindowedAverage:
    def test_window_one_identity(self, seven_frames):
        depths = [f.gt_depth for f in seven_frames.frames]
        out = windowed_depth_average(depths, [f.pose_world for f in seven_frames.frames], seven_frames.intrinsics, window=1)
        for a, b in zip(out, depths):
            assert np.array_equal(a, b)

    def test_static_identical_frames_unchanged(self):
        K = Intrinsics.centered(20, 16, 18.0)
        D = np.random.default_rng(0).uniform(2, 3, (16, 20))
        out = windowed_depth_average([D] * 5, [PoseSE3.identity()] * 5, K, window=5)
        for o in out:
            np.testing.assert_allclose(o, D, rtol=1e-14)

    def test_ground_truth_is_fixed_point(self, seven_frames):
        fr = seven_frames.frames
        out = windowed_depth_average(
            [f.gt_depth for f in fr], [f.pose_world for f in fr], seven_frames.intrinsics,
            window=7, valid=[f.valid for f in fr],
        )
        for o, f in zip(out, fr):
            assert rmse(o, f.gt_depth, f.valid) < 1e-3

    def test_noisy_centre_improves(self, seven_frames):
        fr = seven_frames.frames
        depths = [f.gt_depth.copy() for f in fr]
        depths[3] = perturb_depth(fr[3].gt_depth, 1.0, 0.05, seed=3)
        out = windowed_depth_average(
            depths, [f.pose_world for f in fr], seven_frames.intrinsics, window=7, valid=[f.valid for f in fr]
        )
        v = fr[3].valid
        assert rmse(out[3], fr[3].gt_depth, v) < rmse(depths[3], fr[3].gt_depth, v)

    @pytest.mark.parametrize("window", [0, 2, 9])
    def test_bad_window(self, seven_frames, window):
        fr = seven_frames.frames
        with pytest.raises(FusionError):
            windowed_depth_average([f.gt_depth for f in fr], [f.pose_world for f in fr], seven_frames.intrinsics, window=window)


class TestPly:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
        cols = rng.integers(0, 256, (50, 3)).astype(np.uint8)
        path = write_ply(tmp_path / "c.ply", pts, cols)
        back_pts, back_cols = read_ply(path)
        np.testing.assert_array_equal(back_pts, pts)
        np.testing.assert_array_equal(back_cols, cols)
        raw = path.read_bytes()
        assert raw.startswith(b"ply\nformat binary_little_endian 1.0\n")
        assert len(raw) - raw.index(b"end_header\n") - len(b"end_header\n") == 50 * 15

    def test_float_colours_quantised(self, tmp_path):
        _, cols = read_ply(write_ply(tmp_path / "c.ply", np.zeros((2, 3)), np.array([[0, 0.5, 1.0], [1, 1, 1]])))
        np.testing.assert_array_equal(cols, [[0, 128, 255], [255, 255, 255]])
