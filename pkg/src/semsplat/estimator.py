"""The full SLAM pipeline behind a scikit-learn style estimator.

``fit`` consumes a frame sequence and builds the map and trajectory;
``transform`` localises further frames against the fitted map; ``predict``
renders semantic label images from arbitrary poses.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import CameraIntrinsics, Pose
from .losses import LossWeights
from .mapper import Mapper, Schedule
from .metrics import MetricsReport, Trajectory, ate_rmse, segment_by_query, semantic_metrics
from .imaging import psnr, ssim
from .rasterizer import RenderSettings, render_feature, render_geometric
from .tracker import (
    MapIndex,
    TrackerParams,
    backproject_depth,
    gicp_align,
    keyframe_decision,
    refine_pose_photometric,
)
from .validation import check_frames, check_in_range, check_intrinsics, check_poses, check_positive

MODES = ("deterministic", "concurrent")


@dataclass
class _KeyframeJob:
    frame_index: int
    frame: object
    pose: Pose
    source: object
    distances: np.ndarray
    generation: int
    inserted: threading.Event = field(default_factory=threading.Event)


class GaussianFeatureSLAM(BaseEstimator):
    """Gaussian-splatting SLAM with a jointly optimised semantic feature field.

    Every constructor argument is a plain value so that configurations can
    be read from ``key=value`` files and swept with ``set_params``.

    Attributes set by ``fit``
    -------------------------
    map_ : SceneMap
    trajectory_ : Trajectory
        One world-to-camera pose per input frame.
    keyframe_indices_ : list of int
    inserted_ : list of int
        Gaussians inserted by each keyframe, in keyframe order.
    history_ : list of LossRecord
    timings_ : dict
        Wall-clock seconds per stage. Not part of any deterministic output.
    """

    def __init__(self, K=3, transmittance_floor=1e-4, tile_size=16, alpha_min=1 / 255,
                 stride=4, max_depth_jump=0.05, covariance_k=10, corr_distance=0.1, overlap_distance=0.05,
                 keyframe_threshold=0.8, icp_iterations=30, icp_tolerance=1e-6,
                 tau_insert=0.05, init_scale_factor=0.5, redundancy_check=True, prune=True,
                 feature_update_period=5, prune_period=500, prune_resample_ratio=0.5,
                 topk_count_threshold=0, iterations_per_keyframe=30, final_iterations=0,
                 keyframe_time_budget=None, lambda_geo=1.0, lambda_feat=1.0, ssim_mix=0.2,
                 lambda_depth=1.0, color_term="dssim", lr_means=2e-3, lr_log_scales=5e-3,
                 lr_quats=1e-3, lr_opacity=5e-2, lr_colors=2e-2, lr_features=1e-2,
                 photometric_refine=False, refine_iterations=10, seed=0,
                 mode="deterministic"):
        self.K = K
        self.transmittance_floor = transmittance_floor
        self.tile_size = tile_size
        self.alpha_min = alpha_min
        self.stride = stride
        self.max_depth_jump = max_depth_jump
        self.covariance_k = covariance_k
        self.corr_distance = corr_distance
        self.overlap_distance = overlap_distance
        self.keyframe_threshold = keyframe_threshold
        self.icp_iterations = icp_iterations
        self.icp_tolerance = icp_tolerance
        self.tau_insert = tau_insert
        self.init_scale_factor = init_scale_factor
        self.redundancy_check = redundancy_check
        self.prune = prune
        self.feature_update_period = feature_update_period
        self.prune_period = prune_period
        self.prune_resample_ratio = prune_resample_ratio
        self.topk_count_threshold = topk_count_threshold
        self.iterations_per_keyframe = iterations_per_keyframe
        self.final_iterations = final_iterations
        self.keyframe_time_budget = keyframe_time_budget
        self.lambda_geo = lambda_geo
        self.lambda_feat = lambda_feat
        self.ssim_mix = ssim_mix
        self.lambda_depth = lambda_depth
        self.color_term = color_term
        self.lr_means = lr_means
        self.lr_log_scales = lr_log_scales
        self.lr_quats = lr_quats
        self.lr_opacity = lr_opacity
        self.lr_colors = lr_colors
        self.lr_features = lr_features
        self.photometric_refine = photometric_refine
        self.refine_iterations = refine_iterations
        self.seed = seed
        self.mode = mode

    # -- parameter plumbing -------------------------------------------------

    def _validate_params(self):
        check_positive(self.K, "K", integer=True)
        check_positive(self.stride, "stride", integer=True)
        check_positive(self.tile_size, "tile_size", integer=True)
        check_positive(self.covariance_k, "covariance_k", integer=True)
        check_positive(self.icp_iterations, "icp_iterations", integer=True)
        check_positive(self.corr_distance, "corr_distance")
        check_positive(self.overlap_distance, "overlap_distance")
        check_in_range(self.keyframe_threshold, "keyframe_threshold", 0.0, 1.0)
        check_positive(self.tau_insert, "tau_insert", allow_zero=True)
        check_positive(self.refine_iterations, "refine_iterations", integer=True, allow_zero=True)
        check_positive(self.final_iterations, "final_iterations", integer=True, allow_zero=True)
        if self.keyframe_time_budget is not None:
            check_positive(self.keyframe_time_budget, "keyframe_time_budget")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def _settings(self) -> RenderSettings:
        return RenderSettings(K=self.K, transmittance_floor=self.transmittance_floor,
                              tile_size=self.tile_size, alpha_min=self.alpha_min)

    def _weights(self) -> LossWeights:
        return LossWeights(self.lambda_geo, self.lambda_feat, self.ssim_mix, self.lambda_depth,
                           self.color_term)

    def _schedule(self) -> Schedule:
        return Schedule(self.feature_update_period, self.prune_period, self.prune_resample_ratio,
                        self.topk_count_threshold, self.iterations_per_keyframe)

    def _tracker_params(self) -> TrackerParams:
        return TrackerParams(corr_distance=self.corr_distance,
                             overlap_distance=self.overlap_distance,
                             max_iterations=self.icp_iterations, tolerance=self.icp_tolerance,
                             covariance_k=self.covariance_k)

    def _learning_rates(self) -> dict:
        return {"means": self.lr_means, "log_scales": self.lr_log_scales, "quats": self.lr_quats,
                "opacity_logits": self.lr_opacity, "colors": self.lr_colors,
                "features": self.lr_features}

    # -- fitting ------------------------------------------------------------

    def fit(self, X, y=None, *, intrinsics: CameraIntrinsics, initial_pose: Pose | None = None,
            class_embeddings=None):
        """Run tracking and mapping over the frame sequence ``X``.

        ``y`` may hold ground-truth poses; only its first entry is used, as
        the starting pose when ``initial_pose`` is not given. Without either
        the sequence starts at the identity.
        """
        self._validate_params()
        frames = check_frames(X)
        cam = check_intrinsics(intrinsics, frames[0].shape)
        if initial_pose is None:
            initial_pose = check_poses(y, len(frames), "y")[0] if y is not None else Pose.identity()
        self.intrinsics_ = cam
        self.feature_dim_ = frames[0].feature_dim
        self.class_embeddings_ = None if class_embeddings is None else np.asarray(class_embeddings, float)
        self._mapper = Mapper(cam, self.feature_dim_, self._settings(), self._weights(),
                              self._schedule(), self._learning_rates(), self.seed, self.prune,
                              self.tau_insert, self.redundancy_check, self.init_scale_factor)
        self._poses = [None] * len(frames)
        self.keyframe_indices_ = []
        self.inserted_ = []
        self.track_results_ = []
        self.timings_ = {"tracking": 0.0, "mapping": 0.0, "refinement": 0.0}
        t0 = time.perf_counter()
        if self.mode == "deterministic":
            self._run_interleaved(frames, initial_pose)
        else:
            self._run_concurrent(frames, initial_pose)
        self.timings_["total"] = time.perf_counter() - t0
        self.map_ = self._mapper.map
        self.history_ = self._mapper.history
        self.trajectory_ = Trajectory([f.timestamp for f in frames], list(self._poses))
        return self

    def _track(self, index: MapIndex, frame, init: Pose):
        t = time.perf_counter()
        source = backproject_depth(frame, self.intrinsics_, self.stride, self.covariance_k,
                                   self.max_depth_jump)
        result = gicp_align(source, index, init, self._tracker_params())
        self.timings_["tracking"] += time.perf_counter() - t
        self.track_results_.append((result.converged, result.iterations, result.overlap_ratio))
        return source, result

    def _map_keyframe(self, job: _KeyframeJob, on_inserted=None) -> None:
        """Insert a keyframe, optimise, optionally refine its pose.

        ``on_inserted`` runs between insertion and optimisation.
        """
        mapper = self._mapper
        t = time.perf_counter()
        distances = job.distances
        if job.generation != mapper.map.generation and len(mapper.map):
            # tracked against an older snapshot: measure against the live map instead
            world = job.pose.inverse().apply(job.source.positions)
            distances, _ = MapIndex(mapper.map.means, 1).query(world)
        n = mapper.add_keyframe(job.frame, job.pose, job.source, distances, job.frame_index)
        self.inserted_.append(n)
        self.keyframe_indices_.append(job.frame_index)
        if on_inserted is not None:
            on_inserted()
        self._optimize(self.iterations_per_keyframe, self.keyframe_time_budget)
        self.timings_["mapping"] += time.perf_counter() - t
        if self.photometric_refine and self.refine_iterations > 0:
            t = time.perf_counter()
            kf = mapper.keyframes[-1]
            kf.pose = refine_pose_photometric(mapper.map, kf.frame, kf.pose, self.refine_iterations,
                                              self.intrinsics_, self._settings(), self._weights())
            self._poses[job.frame_index] = kf.pose
            self.timings_["refinement"] += time.perf_counter() - t

    def _optimize(self, iterations: int, budget: float | None = None) -> None:
        if budget is None:
            for _ in range(iterations):
                self._mapper.optimize_step()
            return
        deadline = time.perf_counter() + budget
        while True:
            self._mapper.optimize_step()
            if time.perf_counter() >= deadline:
                break

    def _first_job(self, frame, pose) -> _KeyframeJob:
        source = backproject_depth(frame, self.intrinsics_, self.stride, self.covariance_k,
                                   self.max_depth_jump)
        self.track_results_.append((True, 0, 0.0))
        return _KeyframeJob(0, frame, pose, source, np.full(len(source), np.inf), 0)

    def _run_interleaved(self, frames, initial_pose):
        mapper = self._mapper
        self._poses[0] = initial_pose
        self._map_keyframe(self._first_job(frames[0], initial_pose))
        index = MapIndex.from_map(mapper.map, self.covariance_k)
        for i in range(1, len(frames)):
            source, result = self._track(index, frames[i], self._poses[i - 1])
            self._poses[i] = result.pose
            if len(source) and keyframe_decision(result, self.keyframe_threshold):
                self._map_keyframe(_KeyframeJob(i, frames[i], result.pose, source,
                                                result.correspondence_distances,
                                                mapper.map.generation))
                index = MapIndex.from_map(mapper.map, self.covariance_k)
        t = time.perf_counter()
        self._optimize(self.final_iterations)
        self.timings_["mapping"] += time.perf_counter() - t

    def _run_concurrent(self, frames, initial_pose):
        """Tracker on the calling thread, mapper on a worker thread.

        Keyframes travel to the mapper through a queue. The mapper publishes
        an immutable (index, generation) snapshot once a keyframe's Gaussians
        are inserted and again after its optimisation batch. The tracker
        waits only for the insertion, so it never registers a frame against
        a map lacking the previous keyframe; optimisation overlaps tracking.
        """
        mapper = self._mapper
        jobs: queue.Queue = queue.Queue()
        lock = threading.Lock()
        pending: list[_KeyframeJob] = []
        state = {"index": None, "generation": -1, "error": None}

        def publish():
            index = MapIndex.from_map(mapper.map.snapshot(), self.covariance_k)
            with lock:
                state["index"], state["generation"] = index, mapper.map.generation

        def worker():
            try:
                while (job := jobs.get()) is not None:
                    self._map_keyframe(job, lambda: (publish(), job.inserted.set()))
                    publish()
                t = time.perf_counter()
                self._optimize(self.final_iterations)
                self.timings_["mapping"] += time.perf_counter() - t
            except BaseException as e:  # surfaced on the calling thread
                state["error"] = e
                for j in pending:
                    j.inserted.set()

        thread = threading.Thread(target=worker, name="semsplat-mapper", daemon=True)
        thread.start()
        self._poses[0] = initial_pose

        def submit(job):
            pending.append(job)
            jobs.put(job)
            job.inserted.wait()

        submit(self._first_job(frames[0], initial_pose))
        try:
            for i in range(1, len(frames)):
                if state["error"] is not None:
                    break
                with lock:
                    index, generation = state["index"], state["generation"]
                source, result = self._track(index, frames[i], self._poses[i - 1])
                self._poses[i] = result.pose
                if len(source) and keyframe_decision(result, self.keyframe_threshold):
                    submit(_KeyframeJob(i, frames[i], result.pose, source,
                                        result.correspondence_distances, generation))
        finally:
            jobs.put(None)
            thread.join()
        if state["error"] is not None:
            raise state["error"]

    # -- inference ----------------------------------------------------------

    def render(self, pose: Pose, with_feature: bool = True):
        """Colour, depth and (optionally) feature render of the fitted map."""
        check_is_fitted(self, "map_")
        out = render_geometric(self.map_, pose, self.intrinsics_, self._settings())
        if with_feature:
            out.feature = render_feature(self.map_, out.topk)
        return out

    def predict(self, poses, class_embeddings=None) -> np.ndarray:
        """Semantic label images (N, H, W) rendered from ``poses``."""
        check_is_fitted(self, "map_")
        emb = self.class_embeddings_ if class_embeddings is None else np.asarray(class_embeddings)
        if emb is None:
            raise ValueError("class embeddings are needed: pass them to fit or predict")
        poses = check_poses(poses)
        return np.stack([segment_by_query(self.render(p).feature, emb) for p in poses])

    def transform(self, X, initial_pose: Pose | None = None) -> list[Pose]:
        """Localise frames against the fitted map without changing it."""
        check_is_fitted(self, "map_")
        frames = check_frames(X, self.feature_dim_)
        index = MapIndex.from_map(self.map_, self.covariance_k)
        pose = initial_pose if initial_pose is not None else self.trajectory_.poses[-1]
        out = []
        for f in frames:
            source = backproject_depth(f, self.intrinsics_, self.stride, self.covariance_k,
                                       self.max_depth_jump)
            pose = gicp_align(source, index, pose, self._tracker_params()).pose
            out.append(pose)
        return out

    def evaluate(self, frames, groundtruth: Trajectory, class_embeddings=None,
                 indices=None) -> MetricsReport:
        """Metrics over keyframes (or ``indices``) rendered at the estimated poses."""
        check_is_fitted(self, "map_")
        emb = self.class_embeddings_ if class_embeddings is None else class_embeddings
        idx = list(self.keyframe_indices_ if indices is None else indices)
        poses = {i: self.trajectory_.poses[i] for i in idx}
        for kf in self.map_.keyframes:
            if kf.frame_index in poses:
                poses[kf.frame_index] = kf.pose
        report = evaluate_map(self.map_, self.intrinsics_, self._settings(),
                              [frames[i] for i in idx], [poses[i] for i in idx], emb)
        report.ate_rmse = ate_rmse(self.trajectory_, groundtruth)
        report.extra = {"keyframes": len(self.keyframe_indices_), "frames": len(self.trajectory_),
                        "trajectory_length": groundtruth.length()}
        return report


def evaluate_map(scene, cam, settings, frames, poses, class_embeddings=None) -> MetricsReport:
    """Image and segmentation metrics of ``scene`` rendered at ``poses``.

    PSNR and SSIM are averaged over views; accuracy and mIoU pool all pixels.
    ``ate_rmse`` is left as NaN for the caller to fill in.
    """
    ps, ss, preds, gts = [], [], [], []
    for f, p in zip(frames, poses):
        out = render_geometric(scene, p, cam, settings)
        ps.append(psnr(out.color, f.color))
        ss.append(ssim(out.color, f.color))
        if class_embeddings is not None and f.label is not None:
            preds.append(segment_by_query(render_feature(scene, out.topk), class_embeddings))
            gts.append(f.label)
    acc = miou = float("nan")
    if preds:
        acc, miou = semantic_metrics(np.concatenate([a.ravel() for a in preds]),
                                     np.concatenate([a.ravel() for a in gts]))
    return MetricsReport(float("nan"), float(np.mean(ps)), float(np.mean(ss)), acc, miou, len(scene))
