import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from semsplat.config import SYNTHETIC_PRESET
from semsplat.estimator import GaussianFeatureSLAM
from semsplat.geometry import Frame, Pose, pose_error
from semsplat.metrics import INVALID_LABEL, Trajectory, ate_rmse, semantic_metrics


def make(**kw):
    params = dict(SYNTHETIC_PRESET, iterations_per_keyframe=15)
    params.update(kw)
    return GaussianFeatureSLAM(**params)


@pytest.fixture(scope="module")
def fitted(orbit_sequence, small_cam, room):
    frames, poses = orbit_sequence
    return make().fit(frames, poses, intrinsics=small_cam, class_embeddings=room.class_embeddings)


def test_params_round_trip():
    est = GaussianFeatureSLAM(K=5, feature_update_period=2)
    assert est.get_params()["K"] == 5
    est.set_params(K=1, mode="concurrent")
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    assert "map_" not in vars(c)


def test_defaults_are_the_documented_ones():
    p = GaussianFeatureSLAM().get_params()
    assert (p["K"], p["feature_update_period"], p["prune_period"], p["prune_resample_ratio"]) == (3, 5, 500, 0.5)
    assert (p["corr_distance"], p["overlap_distance"], p["keyframe_threshold"], p["stride"]) == (0.1, 0.05, 0.8, 4)
    assert (p["lr_means"], p["lr_features"], p["ssim_mix"]) == (2e-3, 1e-2, 0.2)


@pytest.mark.parametrize("bad", [dict(K=0), dict(mode="async"), dict(keyframe_threshold=1.5),
                                 dict(stride=0), dict(corr_distance=-1.0)])
def test_invalid_parameters_fail_at_fit(bad, orbit_sequence, small_cam):
    with pytest.raises(ValueError):
        GaussianFeatureSLAM(**bad).fit(orbit_sequence[0][:2], intrinsics=small_cam)


def test_input_validation(orbit_sequence, small_cam):
    frames = orbit_sequence[0]
    with pytest.raises(ValueError, match="increasing"):
        make().fit([frames[1], frames[0]], intrinsics=small_cam)
    odd = Frame(1.0, np.zeros((10, 10, 3)), np.ones((10, 10)), np.zeros((10, 10, 16)))
    with pytest.raises(ValueError, match="size"):
        make().fit([frames[0], odd], intrinsics=small_cam)
    with pytest.raises(ValueError):
        make().fit([], intrinsics=small_cam)


def test_unfitted_estimator_refuses_inference():
    with pytest.raises(NotFittedError):
        GaussianFeatureSLAM().predict([Pose.identity()])


def test_fit_tracks_and_maps(fitted, orbit_sequence, room):
    frames, poses = orbit_sequence
    assert len(fitted.trajectory_) == 12
    assert fitted.keyframe_indices_[0] == 0 and fitted.inserted_[0] > 0
    assert len(fitted.map_) == sum(fitted.inserted_)  # no prune within 500 iterations
    gt = Trajectory([f.timestamp for f in frames], poses)
    assert ate_rmse(fitted.trajectory_, gt) < 0.01
    assert fitted.trajectory_.poses[0] == poses[0]
    assert set(fitted.timings_) == {"tracking", "mapping", "refinement", "total"}
    report = fitted.evaluate(frames, gt)
    assert report.psnr > 25 and report.miou > 0.85
    assert report.extra["keyframes"] == len(fitted.keyframe_indices_)


def test_predict_renders_labels(fitted, orbit_sequence):
    frames, poses = orbit_sequence
    labels = fitted.predict(poses[:3])
    assert labels.shape == (3,) + frames[0].shape and labels.dtype == np.uint8
    acc, _ = semantic_metrics(labels, np.stack([f.label for f in frames[:3]]))
    assert acc > 0.9


def test_transform_localises_without_changing_the_map(fitted, orbit_sequence):
    frames, poses = orbit_sequence
    before = fitted.map_.means.copy()
    est = fitted.transform(frames[4:8], initial_pose=poses[3])
    assert np.array_equal(before, fitted.map_.means)
    for p, q in zip(est, poses[4:8]):
        rot, trans = pose_error(p, q)
        assert rot < 1.0 and trans < 0.03


def test_render_output(fitted, orbit_sequence):
    out = fitted.render(orbit_sequence[1][0])
    assert out.feature.shape == orbit_sequence[0][0].feature_map.shape
    assert np.all((out.color >= 0) & (out.color <= 1))


def test_concurrent_mode_tracks(orbit_sequence, small_cam):
    frames, poses = orbit_sequence
    est = make(mode="concurrent").fit(frames, poses, intrinsics=small_cam)
    gt = Trajectory([f.timestamp for f in frames], poses)
    assert ate_rmse(est.trajectory_, gt) < 0.02
    with pytest.raises(ValueError, match="embeddings"):
        est.predict(poses[:1])
    assert len(est.keyframe_indices_) == len(est.inserted_) == len(est.map_.keyframes)


def test_deterministic_mode_repeats_exactly(orbit_sequence, small_cam):
    frames, poses = orbit_sequence
    a = make(iterations_per_keyframe=5).fit(frames[:6], poses[:6], intrinsics=small_cam)
    b = make(iterations_per_keyframe=5).fit(frames[:6], poses[:6], intrinsics=small_cam)
    for name, arr in a.map_.params().items():
        assert arr.tobytes() == getattr(b.map_, name).tobytes()
    assert a.trajectory_.poses == b.trajectory_.poses
