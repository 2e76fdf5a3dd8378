import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsplat.geometry import (
    CameraIntrinsics,
    Frame,
    Pose,
    perturb_left,
    pose_error,
    se3_compose,
    se3_exp,
)
from semsplat.rasterizer import RenderSettings
from semsplat.losses import LossWeights
from semsplat.synthgen import generate_trajectory, render_ground_truth
from semsplat.tracker import (
    MapIndex,
    TrackerParams,
    TrackResult,
    backproject_depth,
    depth_edges,
    estimate_covariances,
    gicp_align,
    keyframe_decision,
    photometric_loss,
    refine_pose_photometric,
)

from clouds import random_motion, source_from_world, surface_cloud
from oracles import central_difference, random_scene, relative_error

WIDE = TrackerParams(corr_distance=0.5, max_iterations=50, tolerance=1e-10)


def flat_frame(depth):
    h, w = depth.shape
    return Frame(0.0, np.zeros((h, w, 3)), depth, np.zeros((h, w, 2)))


def test_backproject_principal_point(cam100):
    pts = backproject_depth(flat_frame(np.ones((100, 100))), cam100, stride=50)
    i = [tuple(p) for p in pts.pixels].index((50, 50))
    np.testing.assert_allclose(pts.positions[i], [0, 0, 1])


def test_backproject_skips_invalid_depth(cam100):
    d = np.ones((100, 100))
    d[50, 50] = 0
    pts = backproject_depth(flat_frame(d), cam100, stride=50)
    assert (50, 50) not in [tuple(p) for p in pts.pixels]
    assert np.all(pts.positions[:, 2] > 0)
    assert len(backproject_depth(flat_frame(np.zeros((100, 100))), cam100)) == 0


def test_backproject_off_centre_pixel():
    cam = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 100)
    pts = backproject_depth(flat_frame(np.full((100, 200), 2.0)), cam, stride=50)
    i = [tuple(p) for p in pts.pixels].index((150, 50))
    np.testing.assert_allclose(pts.positions[i], [2, 0, 2])


def test_depth_edges_flag_both_sides_of_a_step():
    d = np.ones((6, 6))
    d[:, 3:] = 2.0
    e = depth_edges(d, 0.05)
    assert e[:, 2].all() and e[:, 3].all()
    assert not e[:, [0, 1, 4, 5]].any()


def _eig(cov):
    return np.linalg.eigh(cov)


def test_planar_points_get_plane_normal(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (200, 2)), np.zeros(200)])
    for cov in estimate_covariances(pts, 10):
        w, v = _eig(cov)
        np.testing.assert_allclose(w, [1e-3, 1, 1], atol=1e-12)
        assert abs(abs(v[2, 0]) - 1) < 1e-9


def test_isotropic_cloud_still_regularised(rng):
    for cov in estimate_covariances(rng.normal(size=(100, 3)), 10):
        np.testing.assert_allclose(np.linalg.eigvalsh(cov), [1e-3, 1, 1], atol=1e-12)


def test_corner_normals_follow_nearest_plane(rng):
    a = np.column_stack([rng.uniform(0, 1, 400), rng.uniform(0, 1, 400), np.zeros(400)])
    b = np.column_stack([np.zeros(400), rng.uniform(0, 1, 400), rng.uniform(0, 1, 400)])
    pts = np.concatenate([a, b])
    normals = np.array([np.linalg.eigh(c)[1][:, 0] for c in estimate_covariances(pts, 10)])
    expected = np.where(np.arange(800)[:, None] < 400, [0, 0, 1.0], [1.0, 0, 0])
    # points far enough from the fold that their neighbourhood is single-plane
    far = np.concatenate([a[:, 0], b[:, 2]]) > 0.15
    angle = np.degrees(np.arccos(np.clip(np.abs(np.sum(normals * expected, 1)), 0, 1)))
    assert np.all(angle[far] < 10)


def test_too_few_points_for_covariance():
    with pytest.raises(ValueError):
        estimate_covariances(np.zeros((5, 3)), 10)


def test_gicp_identity_at_ground_truth(rng):
    w = surface_cloud(rng)
    gt = random_motion(rng)
    r = gicp_align(source_from_world(w, gt), MapIndex(w), gt)
    assert r.overlap_ratio == 1.0
    rot, trans = pose_error(r.pose, gt)
    assert rot < 1e-6 and trans < 1e-9


def test_gicp_recovers_known_motion(rng):
    w = surface_cloud(rng)
    axis = np.array([1.0, 2.0, -1.0]) / np.sqrt(6)
    gt = se3_exp(np.concatenate([axis * np.radians(5), [0.03, -0.04, 0.0]]))
    r = gicp_align(source_from_world(w, gt), MapIndex(w), Pose.identity(), WIDE)
    rot, trans = pose_error(r.pose, gt)
    assert r.converged
    assert np.radians(rot) < 1e-3 and trans < 1e-3


def test_gicp_disjoint_clouds_fail(rng):
    w = surface_cloud(rng)
    src = source_from_world(w + [100.0, 0, 0], Pose.identity())
    init = Pose.identity()
    r = gicp_align(src, MapIndex(w), init)
    assert not r.converged and r.pose == init


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gicp_cost_never_increases(seed):
    rng = np.random.default_rng(seed)
    w = surface_cloud(rng, 600)
    gt = random_motion(rng, 8, 0.08)
    r = gicp_align(source_from_world(w, gt), MapIndex(w), Pose.identity(), WIDE)
    for before, after in r.cost_history:
        assert after <= before


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gicp_is_invariant_to_a_common_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    w = surface_cloud(rng, 600)
    gt = random_motion(rng, 5, 0.05)
    src = source_from_world(w, gt)
    # move the world (map and initial pose) by G; camera-frame source is unchanged
    G = random_motion(rng, 30, 1.0)
    init = perturb_left(gt, [0.01, 0, 0, 0, 0.01, 0])
    a = gicp_align(src, MapIndex(w), init, WIDE)
    b = gicp_align(src, MapIndex(G.apply(w)), se3_compose(init, G.inverse()), WIDE)
    res_a = np.linalg.norm(a.pose.inverse().apply(src.positions) - w, axis=1)
    res_b = np.linalg.norm(b.pose.inverse().apply(src.positions) - G.apply(w), axis=1)
    np.testing.assert_allclose(res_a, res_b, atol=1e-9)


def test_overlap_shrinks_with_smaller_gate(rng):
    w = surface_cloud(rng, 600)
    src = source_from_world(w + rng.normal(0, 0.02, w.shape), Pose.identity())
    ratios = [gicp_align(src, MapIndex(w), Pose.identity(),
                         TrackerParams(overlap_distance=t, max_iterations=1)).overlap_ratio
              for t in (0.1, 0.05, 0.02, 0.01)]
    assert ratios == sorted(ratios, reverse=True)


@pytest.mark.parametrize("overlap,expected", [(0.5, True), (0.9, False), (0.8, False)])
def test_keyframe_boundary(overlap, expected):
    r = TrackResult(Pose.identity(), np.zeros(0), overlap, True, 1)
    assert keyframe_decision(r, 0.8) is expected


# -- photometric refinement on the ground-truth room --------------------------

@pytest.fixture(scope="module")
def gt_view(room, small_cam):
    pose = generate_trajectory("orbit", 8, room)[1]
    return pose, render_ground_truth(room, [pose], small_cam)[0]


def test_refinement_keeps_an_optimal_pose(room, small_cam, gt_view):
    pose, frame = gt_view
    out = refine_pose_photometric(room.gaussians, frame, pose, 5, small_cam)
    rot, trans = pose_error(out, pose)
    assert np.radians(rot) < 1e-6 and trans < 1e-6


def test_refinement_halves_a_small_perturbation(room, small_cam, gt_view):
    pose, frame = gt_view
    rng = np.random.default_rng(0)
    w = rng.normal(size=3)
    v = rng.normal(size=3)
    start = perturb_left(pose, np.concatenate([w / np.linalg.norm(w) * np.radians(0.5),
                                               v / np.linalg.norm(v) * 0.005]))
    out = refine_pose_photometric(room.gaussians, frame, start, 25, small_cam)
    r0, t0 = pose_error(start, pose)
    r1, t1 = pose_error(out, pose)
    assert r1 <= 0.5 * r0 and t1 <= 0.5 * t0


def test_twist_gradient_matches_fd():
    rng = np.random.default_rng(4)
    scene = random_scene(rng, 12, depth=(1.5, 2.5), spread=0.2, scale=(0.1, 0.3))
    cam = CameraIntrinsics(16.0, 16.0, 8.0, 8.0, 16, 16)
    frame = Frame(0.0, rng.uniform(size=(16, 16, 3)), rng.uniform(1, 3, (16, 16)),
                  np.zeros((16, 16, 4)))
    s = RenderSettings(transmittance_floor=0.0, alpha_min=0.0)
    wts = LossWeights(ssim_mix=0.0)
    pose = Pose.identity()
    _, g = photometric_loss(scene, frame, pose, cam, s, wts, with_grad=True)
    xi = np.zeros(6)
    fd = central_difference(lambda: photometric_loss(scene, frame, perturb_left(pose, xi), cam, s, wts), xi)
    assert relative_error(g, fd) < 1e-3
