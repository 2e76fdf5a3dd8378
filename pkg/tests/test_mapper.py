import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsplat.geometry import CameraIntrinsics, Frame, Pose
from semsplat.losses import LossWeights
from semsplat.mapper import (
    AdamOptimizer,
    GenerationMismatchError,
    Keyframe,
    Mapper,
    Schedule,
    insert_gaussians,
    prune_map,
    read_checkpoint,
    survival_sample,
    update_contribution_stats,
    write_checkpoint,
)
from semsplat.mapper import survival_probabilities
from semsplat.rasterizer import RenderSettings, render_feature, render_geometric
from semsplat.scene import SceneMap
from semsplat.tracker import SourceCloud

from oracles import random_scene, single_gaussian, survival_oracle


def cloud(n, d=4, rng=None):
    rng = rng or np.random.default_rng(0)
    pos = np.column_stack([rng.uniform(-1, 1, (n, 2)), rng.uniform(1, 2, n)])
    f = rng.normal(size=(n, d))
    return SourceCloud(pos, np.repeat(np.eye(3)[None], n, 0), np.zeros((n, 2), np.int64), f,
                       rng.uniform(size=(n, 3)))


# -- insertion ----------------------------------------------------------------

def test_fully_redundant_frame_inserts_nothing():
    scene = SceneMap.empty(4)
    assert insert_gaussians(scene, cloud(5), np.full(5, 0.01), 0.05, Pose.identity()) == 0
    assert len(scene) == 0 and scene.generation == 0


def test_empty_map_inserts_everything():
    scene = SceneMap.empty(4)
    src = cloud(6)
    assert insert_gaussians(scene, src, np.full(6, np.inf), 0.05, Pose.identity()) == 6
    np.testing.assert_allclose(scene.means, src.positions)
    np.testing.assert_allclose(np.linalg.norm(scene.features, axis=1), 1.0)


def test_threshold_rule_selects_far_points():
    scene = SceneMap.empty(4)
    src = cloud(3)
    pose = Pose([1.0, 0, 0, 0], [0.5, 0, 0])
    assert insert_gaussians(scene, src, [0.01, 0.2, 0.07], 0.05, pose) == 2
    np.testing.assert_allclose(scene.means, pose.inverse().apply(src.positions[[1, 2]]))


def test_insertion_grows_optimizer_state():
    scene = SceneMap.empty(4)
    opt = AdamOptimizer(0, 4)
    insert_gaussians(scene, cloud(7), np.full(7, np.inf), 0.05, Pose.identity(), opt)
    assert len(opt) == len(scene) == 7


def test_distances_must_align_with_source():
    with pytest.raises(ValueError):
        insert_gaussians(SceneMap.empty(4), cloud(3), [1.0, 1.0], 0.05, Pose.identity())


# -- statistics ---------------------------------------------------------------

def _render(scene, n=16, K=3):
    cam = CameraIntrinsics(float(n), float(n), n / 2, n / 2, n, n)
    return render_geometric(scene, Pose.identity(), cam, RenderSettings(K=K))


def test_topk_count_adds_selected_pixels():
    scene = random_scene(np.random.default_rng(0), 10)
    r = _render(scene)
    expected = np.array([(r.topk.index[..., :] == i).sum() for i in range(10)])
    update_contribution_stats(scene, r)
    np.testing.assert_array_equal(scene.topk_count, expected)
    assert expected.sum() == r.topk.count.sum()


def test_offscreen_gaussian_stats_unchanged():
    scene = SceneMap.from_gaussians([single_gaussian((0, 0, 2)), single_gaussian((50, 0, 2))])
    scene.topk_count[1] = 3
    scene.max_contribution[1] = 0.25
    update_contribution_stats(scene, _render(scene))
    assert scene.topk_count[1] == 3 and scene.max_contribution[1] == 0.25
    assert scene.topk_count[0] > 0


def test_max_contribution_is_a_running_max():
    scene = SceneMap.from_gaussians([single_gaussian((0, 0, 2), opacity=0.4)])
    r = _render(scene)
    update_contribution_stats(scene, r)
    assert scene.max_contribution[0] == pytest.approx(0.4)
    scene.opacity_logits[0] = np.log(0.7 / 0.3)
    update_contribution_stats(scene, _render(scene))
    assert scene.max_contribution[0] == pytest.approx(0.7)
    scene.opacity_logits[0] = 0.0
    update_contribution_stats(scene, _render(scene))
    assert scene.max_contribution[0] == pytest.approx(0.7)
    assert 0 <= scene.max_contribution[0] <= 1


def test_stats_from_another_generation_are_rejected():
    scene = random_scene(np.random.default_rng(0), 5)
    r = _render(scene)
    scene.keep(np.arange(5) != 2)
    with pytest.raises(GenerationMismatchError):
        update_contribution_stats(scene, r)


# -- pruning ------------------------------------------------------------------

def _scored(counts, scores):
    n = len(counts)
    scene = random_scene(np.random.default_rng(0), n)
    scene.topk_count[:] = counts
    scene.max_contribution[:] = scores
    return scene


def test_no_candidates_nothing_removed():
    scene = _scored([3, 1, 2, 5], [0.1, 0.2, 0.3, 0.4])
    assert len(prune_map(scene, 0.5, 0)) == 0 and len(scene) == 4
    assert not scene.topk_count.any() and not scene.max_contribution.any()


def test_zero_total_score_keeps_all_candidates():
    scene = _scored([0, 0, 4], [0.0, 0.0, 0.5])
    assert len(prune_map(scene, 0.5, 0)) == 0 and len(scene) == 3


def test_equal_scores_survive_half_the_time():
    kept = np.zeros(4)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        kept[survival_sample(np.ones(4), 2, rng)] += 1
    np.testing.assert_allclose(kept / 10_000, 0.5, atol=0.02)
    np.testing.assert_allclose(survival_oracle(np.ones(4), 2), 0.5)


def test_survival_order_with_exhausted_mass():
    exact = survival_oracle([0.9, 0.1, 0.0, 0.0], 2)
    np.testing.assert_allclose(exact, [1.0, 1.0, 0.0, 0.0])
    exact = survival_oracle([0.9, 0.1, 0.0, 0.0], 3)
    np.testing.assert_allclose(exact, [1.0, 1.0, 0.5, 0.5])
    exact = survival_oracle([0.9, 0.1, 0.05, 0.0], 1)
    assert exact[0] > exact[1] > exact[2] > exact[3] == 0
    rng = np.random.default_rng(1)
    freq = np.zeros(4)
    for _ in range(4000):
        freq[survival_sample([0.9, 0.1, 0.0, 0.0], 3, rng)] += 1
    np.testing.assert_allclose(freq / 4000, [1.0, 1.0, 0.5, 0.5], atol=0.03)


@settings(max_examples=8, deadline=None)
@given(scores=st.lists(st.floats(0.0, 1.0), min_size=3, max_size=6).filter(lambda s: sum(s) > 0.05),
       ratio=st.floats(0.2, 0.8))
def test_sampler_matches_enumeration(scores, ratio):
    n_keep = int(np.ceil(ratio * len(scores)))
    exact = survival_oracle(scores, n_keep)
    rng = np.random.default_rng(42)
    freq = np.zeros(len(scores))
    for _ in range(4000):
        freq[survival_sample(scores, n_keep, rng)] += 1
    np.testing.assert_allclose(freq / 4000, exact, atol=0.035)
    assert exact.sum() == pytest.approx(n_keep)


def test_single_draw_probabilities_normalise():
    p = survival_probabilities([0.2, 0.5, 0.0, 0.3])
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        survival_probabilities([0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 30), ratio=st.floats(0.1, 1.0))
def test_non_candidates_survive_and_optimizer_follows(seed, n, ratio):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 3, n)
    scene = _scored(counts, rng.uniform(0, 1, n))
    scene.features[:, 0] = np.arange(n)  # identity tag
    opt = AdamOptimizer(n, 4)
    opt.m["features"][:, 0] = np.arange(n)
    removed = prune_map(scene, ratio, rng, count_threshold=0, optimizer=opt)
    assert np.all(counts[removed] == 0)
    assert len(opt) == len(scene) == n - len(removed)
    np.testing.assert_array_equal(scene.features[:, 0], opt.m["features"][:, 0])
    n_cand = int((counts == 0).sum())
    assert len(removed) == n_cand - int(np.ceil(ratio * n_cand - 1e-12)) or n_cand == 0


# -- optimisation schedule ----------------------------------------------------

def _fit_problem(period=5, iters=1):
    cam = CameraIntrinsics(24.0, 24.0, 12.0, 12.0, 24, 24)
    target = SceneMap.from_gaussians([single_gaussian((0.05, -0.03, 2.0), scale=0.25, opacity=0.9,
                                                      color=(0.2, 0.7, 0.4), feature=(0, 1, 0, 0))])
    r = render_geometric(target, Pose.identity(), cam)
    feat = render_feature(target, r.topk)
    frame = Frame(0.0, r.color, np.where(r.alpha > 1e-3, r.depth, 0.0), feat)
    m = Mapper(cam, 4, schedule=Schedule(feature_update_period=period), prune=False,
               lr={"means": 5e-3})
    g = single_gaussian((0.0, 0.0, 2.2), scale=0.15, opacity=0.5, color=(0.5, 0.5, 0.5),
                        feature=(0.5, 0.5, 0.5, 0.5))
    m.map.append(g.mean[None], g.log_scale[None], g.rotation[None], [g.opacity_logit],
                 g.color[None], g.feature[None])
    m.optimizer.extend(1)
    m.map.keyframes.append(Keyframe(frame, Pose.identity(), 0))
    return m


def test_single_gaussian_fit_converges():
    m = _fit_problem()
    first = m.optimize_step().geo
    for _ in range(199):
        last = m.optimize_step().geo
    assert last <= first / 10


def test_features_change_only_on_period_steps():
    m = _fit_problem(period=5)
    for it in range(1, 13):
        before = m.map.features.copy()
        rec = m.optimize_step()
        changed = not np.array_equal(before, m.map.features)
        assert rec.feature_step == (it % 5 == 0)
        assert changed == (it % 5 == 0)


def test_period_one_updates_features_every_step():
    m = _fit_problem(period=1)
    for _ in range(3):
        before = m.map.features.copy()
        assert m.optimize_step().feature_step
        assert not np.array_equal(before, m.map.features)
        np.testing.assert_allclose(np.linalg.norm(m.map.features, axis=1), 1.0, atol=1e-6)


def test_mapper_prunes_on_schedule():
    m = _fit_problem()
    m.prune_enabled = True
    m.schedule = Schedule(prune_period=3)
    for it in range(1, 7):
        m.optimize_step()
        # statistics are reset by every prune, so they are empty right after one
        assert (m.map.topk_count.sum() == 0) == (it % 3 == 0)
    assert len(m.optimizer) == len(m.map) == 1


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(feature_update_period=0)
    with pytest.raises(ValueError):
        Schedule(prune_resample_ratio=0.0)
    with pytest.raises(KeyError):
        AdamOptimizer(0, 4, {"bogus": 1.0})


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    scene = random_scene(np.random.default_rng(3), 50, feature_dim=7)
    write_checkpoint(scene, tmp_path / "a.splf")
    back = read_checkpoint(tmp_path / "a.splf")
    write_checkpoint(back, tmp_path / "b.splf")
    assert (tmp_path / "a.splf").read_bytes() == (tmp_path / "b.splf").read_bytes()
    assert back.feature_dim == 7 and len(back) == 50
    np.testing.assert_array_equal(back.means, scene.means.astype(np.float32))


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.splf"
    write_checkpoint(random_scene(np.random.default_rng(0), 3), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError, match="expected"):
        read_checkpoint(p)
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(p)
