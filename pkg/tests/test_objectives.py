"""Loss terms, masks and their weighted combination.

Closed forms are evaluated by hand from the definitions; the SSIM window
oracle and feature-convolution oracle are scalar numpy loops that share no
code with the torch implementation.
"""

import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from colde.geometry import Intrinsics, PoseSE3
from colde.objectives import (
    N_FEATURES,
    FramePair,
    LossWeights,
    ObjectiveError,
    auto_mask,
    combine,
    combined_mask,
    depth_consistency_loss,
    depth_ratio_loss,
    evaluate_pair,
    feature_extract,
    feature_kernels,
    feature_loss,
    normal_consistency_loss,
    orthogonality_loss,
    photometric_loss,
    photometric_map,
    smoothness_loss,
    specular_mask,
    ssim,
    surface_vectors,
    total_loss,
    valid_mask,
)
from colde.synthcolon import default_scene, render_frame

from conftest import make_pair

C1, C2 = 0.01**2, 0.03**2
W = LossWeights()


def constant_pair(h=9, w=9, depth=2.0, n_t=(0, 0, -1), n_s=(0, 0, -1), pose=None, image=None):
    K = Intrinsics.centered(w, h, 8.0)
    img = np.full((3, h, w), 0.5) if image is None else image
    nt = np.broadcast_to(np.asarray(n_t, float)[:, None, None], (3, h, w)).copy()
    ns = np.broadcast_to(np.asarray(n_s, float)[:, None, None], (3, h, w)).copy()
    D = np.full((h, w), depth)
    return FramePair(img, img.copy(), D, D.copy(), nt, ns, pose or PoseSE3.identity(), K)


def ssim_window_oracle(a, b, c1=C1, c2=C2):
    """Direct per-pixel SSIM of single-channel images with reflected 3x3 windows."""
    pa, pb = np.pad(a, 1, mode="reflect"), np.pad(b, 1, mode="reflect")
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            x = pa[i : i + 3, j : j + 3].ravel()
            y = pb[i : i + 3, j : j + 3].ravel()
            mx, my = x.mean(), y.mean()
            vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
            cxy = ((x - mx) * (y - my)).mean()
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return out


class TestLossWeights:
    def test_defaults(self):
        assert (W.alpha, W.lambda1, W.lambda2, W.lambda3, W.lambda4, W.lambda5) == (0.85, 0.1, 0.1, 0.005, 0.001, 0.01)
        assert (W.ssim_c1, W.ssim_c2, W.spec_threshold, W.spec_dilate) == (1e-4, 9e-4, 0.95, 2)

    def test_json_field_names_and_round_trip(self, tmp_path):
        path = tmp_path / "w.json"
        W.to_json(path)
        data = json.loads(path.read_text())
        assert set(data) == {
            "alpha", "lambda1", "lambda2", "lambda3", "lambda4", "lambda5",
            "ssim_c1", "ssim_c2", "spec_threshold", "spec_dilate",
        }
        assert LossWeights.from_json(path) == W

    @pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(alpha=-0.1), dict(lambda3=-1.0), dict(spec_dilate=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw)

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            LossWeights.from_dict({"alpha": 0.5, "beta": 1.0})


class TestSSIM:
    def test_self_similarity(self):
        img = np.random.default_rng(0).uniform(size=(3, 10, 12))
        np.testing.assert_allclose(ssim(img, img), 1.0, atol=1e-12)

    def test_constant_images_closed_form(self):
        out = ssim(np.zeros((1, 6, 6)), np.ones((1, 6, 6)))
        expected = (2 * 0 * 1 + C1) / (0 + 1 + C1) * (0 + C2) / (0 + C2)
        np.testing.assert_allclose(out, expected, rtol=1e-12)
        assert expected == pytest.approx(9.999e-5, rel=1e-4)

    def test_complement_matches_window_oracle(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(8, 9))
        out = ssim(img[None], 1 - img[None])
        np.testing.assert_allclose(out, ssim_window_oracle(img, 1 - img), atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_window_oracle_and_bounds(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(2, 7, 5))
        out = ssim(a[None], b[None])
        np.testing.assert_allclose(out, ssim_window_oracle(a, b), atol=1e-12)
        assert np.all(out <= 1 + 1e-12) and np.all(out >= -1 - 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ObjectiveError):
            ssim(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


class TestPhotometric:
    def test_identical_is_zero(self):
        img = np.random.default_rng(0).uniform(size=(3, 6, 7))
        np.testing.assert_allclose(photometric_map(img, img, W).numpy(), 0.0, atol=1e-12)

    def test_black_against_white(self):
        out = photometric_map(np.zeros((3, 5, 5)), np.ones((3, 5, 5)), W).numpy()
        expected = (1 - 0.85) * 1 + 0.85 / 2 * (1 - C1 / (1 + C1))
        np.testing.assert_allclose(out, expected, rtol=1e-12)
        assert expected == pytest.approx(0.15 + 0.425 * 0.9999, abs=1e-8)

    def test_ground_truth_pair(self, gt_pair):
        tl = total_loss(gt_pair)
        assert tl.photo < 0.02
        m = combined_mask(gt_pair)
        assert tl.photo == pytest.approx(photometric_loss(gt_pair)[m].mean(), rel=1e-12)


class TestFeatures:
    def test_bank_is_frozen_zero_mean_unit_norm(self):
        k = feature_kernels().numpy()[:, 0]
        assert k.shape == (N_FEATURES, 7, 7)
        np.testing.assert_allclose(k.sum(axis=(1, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(k, axis=(1, 2)), 1.0, atol=1e-12)
        assert np.array_equal(k, feature_kernels().numpy()[:, 0])

    def test_constant_image_constant_channels(self):
        f = feature_extract(np.full((3, 16, 20), 0.3))
        assert f.shape == (N_FEATURES, 16, 20)
        assert np.all(f.max(axis=(1, 2)) == f.min(axis=(1, 2)))

    def test_deterministic(self):
        img = np.random.default_rng(0).uniform(size=(3, 16, 16))
        assert np.array_equal(feature_extract(img), feature_extract(img.copy()))

    def test_impulse_reproduces_flipped_kernel(self):
        img = np.zeros((1, 24, 24))
        r, c = 10, 12
        img[0, r, c] = 1.0
        out = feature_extract(img, upsample=False, normalize=False)
        k = feature_kernels().numpy()[:, 0]
        # stride-2 convolution oracle: output (i, j) sees input (2i + a - 3, 2j + b - 3)
        expected = np.zeros((N_FEATURES, 12, 12))
        for i in range(12):
            for j in range(12):
                a, b = r - 2 * i + 3, c - 2 * j + 3
                if 0 <= a < 7 and 0 <= b < 7:
                    expected[:, i, j] = k[:, a, b]
        np.testing.assert_allclose(out, expected, atol=1e-14)
        # around the impulse the response reads the kernel backwards
        np.testing.assert_allclose(out[:, 5, 6], k[:, 3, 3], atol=1e-14)
        np.testing.assert_allclose(out[:, 4, 5], k[:, 5, 5], atol=1e-14)

    def test_rejects_64_channel_input(self):
        with pytest.raises(ObjectiveError):
            feature_extract(np.zeros((64, 8, 8)))

    def test_identical_maps_identity_pose_zero(self):
        img = np.random.default_rng(1).uniform(size=(3, 12, 12))
        pair = constant_pair(12, 12, image=img)
        np.testing.assert_allclose(feature_loss(pair), 0.0, atol=1e-12)

    @pytest.mark.parametrize("c", [-1, N_FEATURES])
    def test_channel_out_of_range(self, c):
        with pytest.raises(ObjectiveError):
            constant_pair().with_(feature_channel=c).validate()

    def test_ground_truth_pair(self, gt_pair, record_property):
        assert total_loss(gt_pair).feat < 0.05
        per_channel = [total_loss(gt_pair.with_(feature_channel=c)).feat for c in range(0, N_FEATURES, 8)]
        record_property("feature_loss_per_channel", per_channel)
        assert np.mean(per_channel) < 0.05


class TestDepthConsistency:
    def test_ratio_examples(self):
        assert depth_ratio_loss(3.0, 1.0) == 0.5
        assert depth_ratio_loss(2.5, 2.5) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, a, b, s):
        v = depth_ratio_loss(a, b)
        assert v == depth_ratio_loss(b, a)
        assert depth_ratio_loss(s * a, s * b) == pytest.approx(v, abs=1e-12)
        assert 0 <= v < 1

    def test_planar_scene_consistent(self):
        K = Intrinsics.centered(40, 32, 35.0)
        ys, xs = np.mgrid[0:32, 0:40].astype(float)
        rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)])
        n, c = np.array([0.2, -0.1, 1.0]), 3.0
        T = PoseSE3.exp([0.02, -0.03, 0.01, 0.1, 0.05, -0.2])
        n_s = T.rotation @ n
        c_s = c + n_s @ T.translation
        D_t = c / np.tensordot(n, rays, 1)
        D_s = c_s / np.tensordot(n_s, rays, 1)
        img = np.random.default_rng(0).uniform(size=(3, 32, 40))
        N = np.zeros((3, 32, 40))
        N[2] = -1
        pair = FramePair(img, img, D_t, D_s, N, N, T, K)
        v = valid_mask(pair)
        assert v.mean() > 0.5
        assert depth_consistency_loss(pair)[v].mean() < 1e-3


class TestNormalConsistency:
    def test_identity_zero(self):
        pair = constant_pair(n_t=(0.6, 0, -0.8), n_s=(0.6, 0, -0.8))
        assert np.all(normal_consistency_loss(pair) == 0.0)

    def test_rotation_correspondence_exact(self):
        Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        pair = constant_pair(n_t=(1, 0, 0), n_s=(0, 1, 0), pose=PoseSE3(Rz, np.zeros(3)))
        v = valid_mask(pair)
        assert v.all()
        assert np.all(normal_consistency_loss(pair)[v] == 0.0)

    def test_antipodal(self):
        pair = constant_pair(n_t=(1, 0, 0), n_s=(-1, 0, 0))
        assert np.all(normal_consistency_loss(pair) == 2.0)

    def test_rotation_invariance_two_norm(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3))
        Q = PoseSE3.exp(np.r_[rng.normal(size=3), 0, 0, 0]).rotation
        assert np.linalg.norm(Q @ a - Q @ b) == pytest.approx(np.linalg.norm(a - b), rel=1e-12)


class TestSurfaceVectors:
    K = Intrinsics.centered(7, 6, 5.0)

    def backproject(self, D, x, y):
        return D[y, x] * np.linalg.solve(self.K.matrix, [x, y, 1.0])

    def test_fronto_parallel_in_plane(self):
        v1, v2 = surface_vectors(np.full((6, 7), 2.0), self.K)
        assert np.all(v1[2] == 0) and np.all(v2[2] == 0)

    def test_ramp_matches_backprojection_oracle(self):
        D = 1.0 + 0.1 * np.arange(6)[:, None] * np.ones((1, 7))
        x, y = 3, 2
        v1, v2 = surface_vectors(D, self.K, (x, y))
        e1 = self.backproject(D, x - 1, y - 1) - self.backproject(D, x + 1, y + 1)
        e2 = self.backproject(D, x + 1, y - 1) - self.backproject(D, x - 1, y + 1)
        np.testing.assert_allclose(v1, e1, atol=1e-14)
        np.testing.assert_allclose(v2, e2, atol=1e-14)
        assert v1[2] == pytest.approx(-0.2, abs=1e-14) and v2[2] == pytest.approx(-0.2, abs=1e-14)

    def test_two_by_two_is_empty(self):
        v1, v2 = surface_vectors(np.ones((2, 2)), Intrinsics.centered(2, 2, 1.0))
        assert v1.size == 0 and v2.size == 0

    def test_border_pixel_rejected(self):
        with pytest.raises(ObjectiveError):
            surface_vectors(np.ones((6, 7)), self.K, (0, 3))


class TestOrthogonality:
    K = Intrinsics.centered(9, 9, 8.0)

    def test_axis_normals_on_plane_exactly_zero(self):
        N = np.zeros((3, 9, 9))
        N[2] = -1
        assert orthogonality_loss(np.full((9, 9), 3.0), N, self.K) == 0.0

    def test_tilted_normals_on_plane(self):
        n = np.array([np.sqrt(0.5), 0.0, -np.sqrt(0.5)])
        N = np.broadcast_to(n[:, None, None], (3, 9, 9))
        # diagonal unit vectors (+-1/fx, +-1/fy, 0) normalised; fx = fy
        diag = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
        expected = abs(n @ diag)
        assert expected == pytest.approx(0.5, abs=1e-15)
        assert orthogonality_loss(np.full((9, 9), 3.0), N, self.K) == pytest.approx(expected, abs=1e-12)

    def test_cylinder_with_analytic_normals(self, cylinder_wall_frame):
        cfg, f = cylinder_wall_frame
        assert f.valid.all()
        assert orthogonality_loss(f.gt_depth, f.gt_normals, cfg.intrinsics) < 0.02


class TestSmoothness:
    ramp = 1.0 + 0.1 * np.arange(12)[None, :] * np.ones((10, 1))

    def test_constant_depth_zero(self):
        assert smoothness_loss(np.full((10, 12), 2.0), np.random.default_rng(0).uniform(size=(3, 10, 12))) == 0.0

    def test_ramp_closed_form(self):
        d = (1 / self.ramp) / (1 / self.ramp).mean()
        expected = np.abs(np.diff(d, axis=1)).mean() + np.abs(np.diff(d, axis=0)).mean()
        out = smoothness_loss(self.ramp, np.full((3, 10, 12), 0.4))
        assert out > 0
        assert out == pytest.approx(expected, rel=1e-12)

    def test_aligned_edge_reduces(self):
        flat = smoothness_loss(self.ramp, np.full((3, 10, 12), 0.4))
        edges = np.zeros((3, 10, 12))
        edges[:, :, ::2] = 1.0
        assert smoothness_loss(self.ramp, edges) < flat


class TestMasks:
    def test_static_pair_auto_mask_empty(self):
        img = np.random.default_rng(0).uniform(size=(3, 12, 12))
        pair = constant_pair(12, 12, image=img)
        assert not auto_mask(pair).any()

    def test_moving_textured_pair_mostly_kept(self, gt_pair):
        assert auto_mask(gt_pair).mean() > 0.9

    def test_noise_source_recorded(self, gt_pair, record_property):
        noise = np.random.default_rng(5).uniform(size=gt_pair.source.shape)
        frac = float(auto_mask(gt_pair.with_(source=noise, source_features=None)).mean())
        record_property("auto_mask_noise_fraction", frac)
        assert 0.0 <= frac <= 1.0

    def test_specular_dark_image_kept(self):
        assert specular_mask(np.zeros((3, 8, 8)), W).all()

    def test_specular_single_pixel_block(self):
        img = np.zeros((3, 11, 11))
        img[1, 5, 6] = 1.0
        m = specular_mask(img, W)
        expected = np.ones((11, 11), bool)
        expected[3:8, 4:9] = False
        assert np.array_equal(m, expected)

    def test_specular_covers_rendered_highlights(self):
        cfg = default_scene(1, width=96, height=72, specular="phong", specular_strength=1.0, texture="none")
        f = render_frame(cfg, PoseSE3.from_rotation([0, np.radians(50), 0]))
        strong = f.specular > 0.5
        assert strong.sum() > 0
        dropped = ~specular_mask(f.image, W)
        assert dropped[strong].mean() >= 0.95

    def test_combined_is_conjunction(self, gt_pair):
        t = evaluate_pair(gt_pair, W)
        assert torch.equal(t.mask, t.auto & t.spec & t.valid)


class TestTotalLoss:
    def test_decomposition_identity(self, gt_pair):
        w = LossWeights(lambda1=0.3, lambda2=0.7, lambda3=0.2, lambda4=0.05, lambda5=0.4)
        tl = total_loss(gt_pair, w)
        assert abs(tl.recombine(w) - tl.total) < 1e-12

    def test_zero_lambdas_give_photometric_mean(self, gt_pair):
        w = LossWeights(lambda1=0, lambda2=0, lambda3=0, lambda4=0, lambda5=0)
        tl = total_loss(gt_pair, w)
        m = combined_mask(gt_pair, w)
        assert tl.total == pytest.approx(photometric_loss(gt_pair, w)[m].mean(), rel=1e-12)

    def test_static_pair_reduces_to_smoothness(self):
        img = np.random.default_rng(0).uniform(size=(3, 12, 12))
        pair = constant_pair(12, 12, image=img)
        tl = total_loss(pair)
        assert tl.empty_mask and tl.masked_pixel_count == 0
        assert tl.orth == 0.0
        assert tl.total == W.lambda5 * tl.smooth

    @pytest.mark.parametrize("name", ["lambda1", "lambda2", "lambda3", "lambda4", "lambda5"])
    def test_monotone_in_each_lambda(self, gt_pair, name):
        noisy = gt_pair.with_(target_depth=gt_pair.target_depth * 1.1)
        base = total_loss(noisy)
        assert min(base.feat, base.depth, base.norm, base.orth, base.smooth) > 0
        bumped = LossWeights(**{**W.to_dict(), name: getattr(W, name) + 0.05})
        assert total_loss(noisy, bumped).total > base.total

    def test_maps_nonnegative_finite_on_mask(self, gt_pair):
        t = evaluate_pair(gt_pair, W)
        for name in ("photo", "feat", "depth", "norm"):
            v = getattr(t, name)[t.mask]
            assert torch.all(torch.isfinite(v)) and torch.all(v >= 0)

    def test_frozen_mask_override(self, gt_pair):
        m = np.zeros(gt_pair.intrinsics.shape, bool)
        m[10:20, 10:20] = True
        tl = total_loss(gt_pair, mask=m)
        assert tl.masked_pixel_count == 100

    def test_sequence_pairs_below_threshold(self, small_sequence):
        for k in range(len(small_sequence) - 1):
            assert total_loss(make_pair(small_sequence, k, k + 1)).total < 0.05

    def test_combine_returns_differentiable_total(self, gt_pair):
        d = torch.tensor(gt_pair.target_depth, requires_grad=True)
        total, breakdown = combine(evaluate_pair(gt_pair, W, target_depth=d), W)
        total.backward()
        assert d.grad is not None and float(total.detach()) == breakdown.total
