import math

import numpy as np
import pytest
from conftest import true_outlier_fraction
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrecon.geom import (
    ConfidenceMap, DepthMap, FlowField, ImageSize, Intrinsics, Pointmap, PoseSE3, pixel_grid, project,
    rotation_angle,
)
from dynrecon.graph import build_window_graph
from dynrecon.oracle import (
    DynamicSphere, LinearMotion, NoiseSpec, Plane, SceneSpec, make_scene, perturb, render_sequence,
)
from dynrecon.pairwise import (
    EstimationError, PairEstimate, PoseEstimationError, analyze_pairs, default_alpha,
    estimate_focal, estimate_relative_pose, induced_flow, smooth_l1, static_mask,
)


def _flow(values, valid=None):
    return FlowField(np.asarray(values, dtype=float), valid)


def _pose_errors(est: PoseSE3, true: PoseSE3):
    rot = rotation_angle(est.rotation.T @ true.rotation)
    return rot, float(np.linalg.norm(est.translation - true.translation))


def _reprojection_error(seq, edge, pose):
    pm = seq.pairs[edge].pointmap_other
    k = seq.intrinsics[edge[1]]
    return np.linalg.norm(project(pose.apply(pm.points), k) - pixel_grid(k.size), axis=-1)


def _iou(a, b):
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)


@pytest.fixture(scope="module")
def seq500():
    spec = make_scene(num_frames=3, height=48, width=64, focal=500.0, dynamic=False)
    return render_sequence(spec, build_window_graph(3, 1, 1))


class TestFocal:
    def test_clean_oracle(self, seq500):
        for pair in seq500.pairs.values():
            assert estimate_focal(pair.pointmap_self) == pytest.approx(500.0, rel=5e-3)

    def test_depth_noise(self, seq500):
        noisy = perturb(seq500, NoiseSpec(0.05), seed=4)
        for pair in noisy.pairs.values():
            assert estimate_focal(pair.pointmap_self) == pytest.approx(500.0, rel=2e-2)

    def test_coordinate_noise(self, seq500):
        # noise off the pixel rays, 0.05% of depth per coordinate
        rng = np.random.default_rng(0)
        pts = seq500.pairs[(0, 1)].pointmap_self.points
        noisy = pts + rng.normal(size=pts.shape) * 5e-4 * pts[..., 2:]
        assert estimate_focal(Pointmap(noisy)) == pytest.approx(500.0, rel=2e-2)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(1e-3, 1e3))
    def test_scale_invariant(self, s):
        pm = make_scene(num_frames=2, height=24, width=32, focal=30.0, dynamic=False)
        seq = render_sequence(pm, build_window_graph(2, 1, 1))
        pts = seq.pairs[(0, 1)].pointmap_self.points
        f1 = estimate_focal(Pointmap(pts))
        f2 = estimate_focal(Pointmap(pts * s))
        assert f2 == pytest.approx(f1, rel=1e-6)

    def test_points_on_axis_raise(self):
        pts = np.zeros((40, 1, 3))
        pts[..., 2] = np.linspace(1, 2, 40)[:, None]
        with pytest.raises(EstimationError):
            estimate_focal(Pointmap(pts), principal_point=(0.0, 0.0))

    def test_too_few_valid_pixels(self):
        pts = np.full((4, 4, 3), np.nan)
        with pytest.raises(EstimationError):
            estimate_focal(Pointmap(pts))


class TestRelativePose:
    def test_exact_pair(self, small_seq):
        k = small_seq.intrinsics[0]
        for e in [(0, 1), (2, 1), (3, 5)]:
            res = estimate_relative_pose(small_seq.pairs[e], k)
            rot, trans = _pose_errors(res.pose, small_seq.relative_poses[e])
            assert rot < 1e-4 and trans < 1e-6
            assert not res.failed

    def test_identical_frames_give_identity(self, small_seq):
        pair = small_seq.pairs[(0, 1)]
        same = PairEstimate(pair.pointmap_self, pair.pointmap_self, pair.conf_self, pair.conf_self, (0, 1))
        res = estimate_relative_pose(same, small_seq.intrinsics[0])
        rot, trans = _pose_errors(res.pose, PoseSE3.identity())
        assert rot < 1e-6 and trans < 1e-6
        assert res.inlier_mask.all()

    def test_dynamic_outliers_rejected(self, pnp_seq):
        edge = next(e for e in pnp_seq.graph.edges
                    if abs(e[0] - e[1]) >= 4 and 0.30 <= true_outlier_fraction(pnp_seq, e) < 0.40)
        k = pnp_seq.intrinsics[edge[1]]
        res = estimate_relative_pose(pnp_seq.pairs[edge], k, rng=np.random.default_rng(0))
        rot, _ = _pose_errors(res.pose, pnp_seq.relative_poses[edge])
        assert math.degrees(rot) < 0.5
        outliers = _reprojection_error(pnp_seq, edge, pnp_seq.relative_poses[edge]) >= 2.0
        assert (~res.inlier_mask[outliers]).mean() >= 0.9

    def test_small_gap_pair_is_ambiguous(self, pnp_seq):
        # The frozen mover is displaced by only a few pixels here, and a wrong
        # pose explains more pixels than the true one; consensus picks it.
        edge = (16, 18)
        k = pnp_seq.intrinsics[edge[1]]
        res = estimate_relative_pose(pnp_seq.pairs[edge], k, rng=np.random.default_rng(0))
        true_count = (_reprojection_error(pnp_seq, edge, pnp_seq.relative_poses[edge]) < 2.0).sum()
        assert res.inlier_count > true_count
        assert math.degrees(_pose_errors(res.pose, pnp_seq.relative_poses[edge])[0]) > 0.5

    def test_estimated_pose_explains_static_flow(self, small_seq):
        for e in [(0, 1), (1, 3)]:
            k = small_seq.intrinsics[e[0]]
            res = estimate_relative_pose(small_seq.pairs[e], small_seq.intrinsics[e[1]])
            f_cam = induced_flow(small_seq.depths[e[0]], k, small_seq.intrinsics[e[1]], res.pose)
            flow = small_seq.flows[e]
            residual = np.linalg.norm(f_cam.flow - flow.flow, axis=-1)[flow.valid]
            dynamic_share = small_seq.frames[e[0]].dynamic[flow.valid].mean()
            assert (residual < 2.0).mean() >= 1.0 - dynamic_share - 1e-12

    def test_too_few_points_raise(self, small_seq):
        pair = small_seq.pairs[(0, 1)]
        pts = np.full(pair.pointmap_other.points.shape, np.nan)
        pts[0, :5] = pair.pointmap_other.points[0, :5]
        bad = PairEstimate(pair.pointmap_self, Pointmap(pts), pair.conf_self, pair.conf_other, (0, 1))
        with pytest.raises(PoseEstimationError):
            estimate_relative_pose(bad, small_seq.intrinsics[1])

    def test_deterministic_given_rng(self, small_seq):
        noisy = perturb(small_seq, NoiseSpec(0.02), seed=0)
        k = small_seq.intrinsics[1]
        a = estimate_relative_pose(noisy.pairs[(0, 1)], k, rng=np.random.default_rng(5))
        b = estimate_relative_pose(noisy.pairs[(0, 1)], k, rng=np.random.default_rng(5))
        assert np.array_equal(a.pose.matrix(), b.pose.matrix())
        assert np.array_equal(a.inlier_mask, b.inlier_mask)


class TestPairEstimate:
    def test_size_mismatch(self):
        a = Pointmap(np.ones((2, 2, 3)))
        b = Pointmap(np.ones((2, 3, 3)))
        c = ConfidenceMap(np.ones((2, 2)))
        with pytest.raises(ValueError):
            PairEstimate(a, b, c, c, (0, 1))

    def test_same_frame_ids(self):
        a = Pointmap(np.ones((2, 2, 3)))
        c = ConfidenceMap(np.ones((2, 2)))
        with pytest.raises(ValueError):
            PairEstimate(a, a, c, c, (1, 1))


class TestInducedFlow:
    def test_identity_pose_gives_zero_flow(self):
        rng = np.random.default_rng(0)
        k = Intrinsics(40.0, ImageSize(12, 16))
        depth = DepthMap(rng.uniform(1.0, 5.0, (12, 16)))
        f = induced_flow(depth, k, k, PoseSE3.identity())
        assert f.valid.all()
        np.testing.assert_allclose(f.flow, 0.0, atol=1e-12)

    def test_lateral_translation_parallax(self):
        # x-translation 0.1 at unit depth with f = 50: five pixels of horizontal flow
        k = Intrinsics(50.0, ImageSize(10, 10))
        depth = DepthMap(np.ones((10, 10)))
        f = induced_flow(depth, k, k, PoseSE3(np.eye(3), [0.1, 0.0, 0.0]))
        np.testing.assert_allclose(f.flow[..., 0], 5.0, atol=1e-12)
        np.testing.assert_allclose(f.flow[..., 1], 0.0, atol=1e-12)

    def test_points_behind_target_are_invalid(self):
        k = Intrinsics(50.0, ImageSize(4, 4))
        depth = DepthMap(np.ones((4, 4)))
        f = induced_flow(depth, k, k, PoseSE3(np.eye(3), [0.0, 0.0, -2.0]))
        assert not f.valid.any()


class TestStaticMask:
    def test_smooth_l1_hand_values(self):
        assert smooth_l1(np.array([[0.5, 2.0]])).tolist() == [1.625]
        assert smooth_l1(np.array([[0.0, 0.0]])).tolist() == [0.0]

    def test_identical_flows_are_static(self):
        rng = np.random.default_rng(1)
        f = _flow(rng.normal(size=(6, 7, 2)) * 5)
        assert static_mask(f, f, alpha=0.1).is_static.all()

    def test_single_outlier_pixel(self):
        alpha, beta = 0.64, 1.0
        est = np.zeros((5, 6, 2))
        est[2, 3] = [2 * alpha + beta, 0.0]
        mask = static_mask(_flow(np.zeros((5, 6, 2))), _flow(est), alpha, beta)
        expected = np.ones((5, 6), bool)
        expected[2, 3] = False
        assert np.array_equal(mask.is_static, expected)

    def test_invalid_flow_is_never_static(self):
        valid = np.ones((3, 3), bool)
        valid[1, 1] = False
        mask = static_mask(_flow(np.zeros((3, 3, 2))), _flow(np.zeros((3, 3, 2)), valid), alpha=1.0)
        assert mask.is_static.sum() == 8 and not mask.is_static[1, 1]

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 10), st.floats(0.01, 10), st.integers(0, 1000))
    def test_monotone_in_alpha(self, a1, a2, seed):
        lo, hi = sorted((a1, a2))
        rng = np.random.default_rng(seed)
        f1 = _flow(rng.normal(size=(6, 6, 2)) * 3)
        f2 = _flow(rng.normal(size=(6, 6, 2)) * 3)
        small = static_mask(f1, f2, lo).is_static
        large = static_mask(f1, f2, hi).is_static
        assert not (small & ~large).any()

    def test_default_alpha_is_one_percent_of_diagonal(self):
        assert default_alpha(ImageSize(30, 40)) == pytest.approx(0.5)

    def test_oracle_masks_match_moving_region(self):
        k = Intrinsics(30.0, ImageSize(24, 32))
        mover = DynamicSphere(0.7, LinearMotion((-0.6, 0.2, 4.0), (0.2, 0.0, 0.0)))
        poses = tuple(PoseSE3(np.eye(3), [-0.03 * t, 0.0, -0.05 * t]) for t in range(4))
        spec = SceneSpec((Plane((0.0, 0.0, 8.0), (0.0, 0.0, -1.0)),), (mover,), poses, k)
        seq = render_sequence(spec, build_window_graph(4, 2, 1))
        for (t, t2), flow in seq.flows.items():
            f_cam = induced_flow(seq.depths[t], k, k, seq.relative_poses[(t, t2)])
            mask = static_mask(f_cam, flow, default_alpha(k.size))
            assert _iou(mask.is_dynamic & flow.valid, seq.frames[t].dynamic & flow.valid) >= 0.9

    def test_motion_below_alpha_is_invisible(self, scene30):
        # frames 13..18 of the default scene: the mover's image motion matches the camera's
        k = scene30.intrinsics[0]
        f_cam = induced_flow(scene30.depths[14], k, k, scene30.relative_poses[(14, 15)])
        mask = static_mask(f_cam, scene30.flows[(14, 15)], default_alpha(k.size))
        assert scene30.frames[14].dynamic.any()
        assert not (mask.is_dynamic & scene30.flows[(14, 15)].valid).any()


class TestAnalyzePairs:
    def test_exact_inputs(self, small_seq):
        res = analyze_pairs(small_seq.graph, small_seq.pairs, small_seq.flows)
        assert res.failed_edges == []
        for t, f in res.focals.items():
            assert f == pytest.approx(30.0, rel=1e-6)
        for e, r in res.poses.items():
            rot, trans = _pose_errors(r.pose, small_seq.relative_poses[e])
            assert rot < 1e-4 and trans < 1e-6
        assert set(res.masks) == set(small_seq.graph.edges)

    def test_failed_edge_is_flagged(self, small_seq):
        pairs = dict(small_seq.pairs)
        p = pairs[(2, 3)]
        pairs[(2, 3)] = PairEstimate(p.pointmap_self, Pointmap(np.full(p.pointmap_other.points.shape, np.nan)),
                                     p.conf_self, p.conf_other, (2, 3))
        res = analyze_pairs(small_seq.graph, pairs, small_seq.flows)
        assert res.failed_edges == [(2, 3)]
        assert res.poses[(2, 3)].failed
        assert not res.masks[(2, 3)].is_static.any()

    def test_seeded_runs_agree(self, small_seq):
        noisy = perturb(small_seq, NoiseSpec(0.02), seed=1)
        a = analyze_pairs(small_seq.graph, noisy.pairs, small_seq.flows, seed=3)
        b = analyze_pairs(small_seq.graph, noisy.pairs, small_seq.flows, seed=3)
        for e in small_seq.graph.edges:
            assert np.array_equal(a.poses[e].pose.matrix(), b.poses[e].pose.matrix())
            assert np.array_equal(a.masks[e].is_static, b.masks[e].is_static)
