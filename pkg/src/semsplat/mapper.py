"""Map mutation and optimisation.

* redundancy-aware insertion driven by tracking correspondence distances,
* two-stage pruning: low Top-K participation selects candidates, survivors
  are drawn without replacement with probability proportional to their
  peak blending weight,
* the hybrid schedule: geometry every step, features every N-th step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Frame, Pose, logit, quat_normalize
from .losses import LossResult, LossWeights, compute_losses
from .rasterizer import (
    RenderOutput,
    RenderSettings,
    backward_feature,
    backward_geometric,
    render_feature,
    render_geometric,
)
from .scene import PARAM_GROUPS, SceneMap

__all__ = [
    "AdamOptimizer",
    "GenerationMismatchError",
    "Keyframe",
    "LossRecord",
    "LossWeights",
    "Mapper",
    "Schedule",
    "SceneMap",
    "compute_losses",
    "insert_gaussians",
    "prune_map",
    "read_checkpoint",
    "survival_sample",
    "update_contribution_stats",
    "write_checkpoint",
]

DEFAULT_LR = {
    "means": 2e-3,
    "log_scales": 5e-3,
    "quats": 1e-3,
    "opacity_logits": 5e-2,
    "colors": 2e-2,
    "features": 1e-2,
}


class GenerationMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    feature_update_period: int = 5
    prune_period: int = 500
    prune_resample_ratio: float = 0.5
    topk_count_threshold: int = 0
    iterations_per_keyframe: int = 30

    def __post_init__(self):
        if self.feature_update_period < 1 or self.prune_period < 1:
            raise ValueError("periods must be >= 1")
        if not (0.0 < self.prune_resample_ratio <= 1.0):
            raise ValueError("prune_resample_ratio must lie in (0, 1]")
        if self.iterations_per_keyframe < 0:
            raise ValueError("iterations_per_keyframe must be >= 0")


@dataclass
class Keyframe:
    frame: Frame
    pose: Pose
    frame_index: int = -1


@dataclass
class LossRecord:
    iteration: int
    total: float
    geo: float
    feat: float
    feature_step: bool
    n_gaussians: int
    pruned: int = 0


class AdamOptimizer:
    """Per-group Adam with per-Gaussian step counters.

    Only rows that received a nonzero gradient are updated, so Gaussians
    outside the sampled view keep both their parameters and moments.
    """

    def __init__(self, n: int, feature_dim: int, lr: dict | None = None,
                 betas=(0.9, 0.999), eps: float = 1e-15):
        self.lr = dict(DEFAULT_LR)
        if lr:
            unknown = set(lr) - set(DEFAULT_LR)
            if unknown:
                raise KeyError(f"unknown parameter group(s): {sorted(unknown)}")
            self.lr.update(lr)
        self.betas = betas
        self.eps = eps
        self.feature_dim = feature_dim
        self.m, self.v, self.steps = {}, {}, {}
        for name in PARAM_GROUPS:
            shape = self._shape(name, n)
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            self.steps[name] = np.zeros(n, dtype=np.int64)

    def _shape(self, name, n):
        w = {"means": 3, "log_scales": 3, "quats": 4, "opacity_logits": None, "colors": 3,
             "features": self.feature_dim}[name]
        return (n,) if w is None else (n, w)

    def __len__(self):
        return len(self.steps["means"])

    def extend(self, n: int):
        for name in PARAM_GROUPS:
            self.m[name] = np.concatenate([self.m[name], np.zeros(self._shape(name, n))])
            self.v[name] = np.concatenate([self.v[name], np.zeros(self._shape(name, n))])
            self.steps[name] = np.concatenate([self.steps[name], np.zeros(n, dtype=np.int64)])

    def keep(self, mask):
        for name in PARAM_GROUPS:
            self.m[name] = self.m[name][mask]
            self.v[name] = self.v[name][mask]
            self.steps[name] = self.steps[name][mask]

    def step(self, scene: SceneMap, grads: dict):
        b1, b2 = self.betas
        for name, g in grads.items():
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            rows = np.any(g.reshape(len(g), -1) != 0, axis=1)
            if not rows.any():
                continue
            idx = np.flatnonzero(rows)
            gr = g[idx]
            m = self.m[name][idx] = b1 * self.m[name][idx] + (1 - b1) * gr
            v = self.v[name][idx] = b2 * self.v[name][idx] + (1 - b2) * gr * gr
            t = self.steps[name][idx] = self.steps[name][idx] + 1
            shape = (-1,) + (1,) * (gr.ndim - 1)
            mhat = m / (1 - b1 ** t).reshape(shape)
            vhat = v / (1 - b2 ** t).reshape(shape)
            param = getattr(scene, name)
            param[idx] -= self.lr[name] * mhat / (np.sqrt(vhat) + self.eps)


def _normalize_rows(a):
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return np.where(n > 0, a / np.where(n > 0, n, 1.0), a)


def insert_gaussians(scene: SceneMap, source, distances, tau_insert: float, pose: Pose,
                     optimizer: AdamOptimizer | None = None, scale_factor: float = 0.5,
                     spacing_k: int = 4) -> int:
    """Add a Gaussian for every source point whose nearest map Gaussian is at
    least ``tau_insert`` away; returns how many were added.

    ``distances`` are the per-point correspondence distances produced by
    tracking (``+inf`` where no neighbour was found).
    """
    distances = np.asarray(distances, dtype=np.float64)
    if len(distances) != len(source):
        raise ValueError("distances must align 1:1 with the source points")
    sel = np.flatnonzero(distances >= tau_insert)
    if len(sel) == 0:
        return 0
    cam_pts = source.positions
    # isotropic size from the spacing of the full source cloud
    k = min(spacing_k, len(cam_pts) - 1)
    if k >= 1:
        d, _ = cKDTree(cam_pts).query(cam_pts[sel], k=k + 1)
        spacing = d[:, 1:].mean(axis=1)
    else:
        spacing = np.full(len(sel), 0.01)
    spacing = np.maximum(spacing, 1e-4)
    world = pose.inverse().apply(cam_pts[sel])
    n = len(sel)
    feats = np.asarray(source.features[sel], dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    fallback = np.full(scene.feature_dim, 1.0 / math.sqrt(scene.feature_dim))
    feats = np.where(norms > 0, feats / np.where(norms > 0, norms, 1.0), fallback)
    scene.append(
        means=world,
        log_scales=np.repeat(np.log(spacing * scale_factor)[:, None], 3, axis=1),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, float(logit(0.5))),
        colors=np.clip(source.colors[sel], 0.0, 1.0),
        features=feats,
    )
    if optimizer is not None:
        optimizer.extend(n)
    return n


def update_contribution_stats(scene: SceneMap, render: RenderOutput) -> None:
    """Accumulate Top-K selection counts and running peak blending weights."""
    if render.generation != scene.generation or len(render.contributions) != len(scene):
        raise GenerationMismatchError(
            f"render of generation {render.generation} applied to map generation {scene.generation}")
    scene.topk_count += render.topk.selection_counts(len(scene))
    np.maximum(scene.max_contribution, render.contributions, out=scene.max_contribution)


def survival_sample(scores, n_keep: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n_keep`` items drawn without replacement, each draw
    proportional to ``scores`` among the items not yet drawn.

    Uses exponential keys ``u ** (1 / s)`` (the top ``n_keep`` keys have the
    same law as successive proportional draws). Zero-score items are only
    chosen once positive mass is exhausted, uniformly among themselves.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    if n_keep >= n:
        return np.arange(n)
    u = rng.random(n)
    pos = s > 0
    # ascending log(-log u) - log s is the same order as descending u ** (1/s),
    # without overflow for tiny scores
    keys = np.full(n, np.inf)
    keys[pos] = np.log(-np.log(u[pos])) - np.log(s[pos])
    # zero-score items: ranked after all positives, in random order
    order = np.lexsort((-u, keys))
    return np.sort(order[:n_keep])


def prune_map(scene: SceneMap, ratio: float = 0.5, rng=None, count_threshold: int = 0,
              optimizer: AdamOptimizer | None = None) -> np.ndarray:
    """Two-stage pruning; returns the removed indices (pre-removal numbering).

    Candidates are Gaussians selected into at most ``count_threshold`` Top-K
    sets since the last prune. Of those, ``ceil(ratio * n_candidates)`` are
    kept, sampled by peak blending weight; the rest are removed. Statistics
    of all survivors are reset.
    """
    rng = np.random.default_rng(rng)
    cand = np.flatnonzero(scene.topk_count <= count_threshold)
    removed = np.zeros(0, dtype=np.int64)
    if len(cand):
        scores = scene.max_contribution[cand]
        if scores.sum() > 0:
            n_keep = math.ceil(ratio * len(cand) - 1e-12)
            kept = cand[survival_sample(scores, n_keep, rng)]
            removed = np.setdiff1d(cand, kept)
    if len(removed):
        mask = np.ones(len(scene), dtype=bool)
        mask[removed] = False
        scene.keep(mask)
        if optimizer is not None:
            optimizer.keep(mask)
    scene.topk_count[:] = 0
    scene.max_contribution[:] = 0.0
    return removed


def survival_probabilities(scores) -> np.ndarray:
    """Single-draw survival distribution: scores normalised to sum to one."""
    s = np.asarray(scores, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        raise ValueError("survival distribution undefined when all scores are zero")
    return s / total


class Mapper:
    """Owns the map, its optimiser state and the keyframe set."""

    def __init__(self, cam: CameraIntrinsics, feature_dim: int,
                 settings: RenderSettings = RenderSettings(),
                 weights: LossWeights = LossWeights(), schedule: Schedule = Schedule(),
                 lr: dict | None = None, seed: int = 0, prune: bool = True,
                 tau_insert: float = 0.05, redundancy_check: bool = True,
                 init_scale_factor: float = 0.5):
        self.cam = cam
        self.map = SceneMap.empty(feature_dim)
        self.optimizer = AdamOptimizer(0, feature_dim, lr)
        self.settings = settings
        self.weights = weights
        self.schedule = schedule
        self.rng = np.random.default_rng(seed)
        self.prune_enabled = prune
        self.tau_insert = tau_insert
        self.redundancy_check = redundancy_check
        self.init_scale_factor = init_scale_factor
        self.iteration = 0
        self.history: list[LossRecord] = []

    @property
    def keyframes(self) -> list:
        return self.map.keyframes

    def add_keyframe(self, frame: Frame, pose: Pose, source, distances, frame_index: int = -1) -> int:
        tau = self.tau_insert if self.redundancy_check else -np.inf
        n = insert_gaussians(self.map, source, distances, tau, pose, self.optimizer,
                             self.init_scale_factor)
        self.map.keyframes.append(Keyframe(frame, pose, frame_index))
        return n

    def optimize_step(self, keyframe: Keyframe | None = None) -> LossRecord:
        """One optimisation iteration on a uniformly sampled keyframe."""
        if not self.map.keyframes:
            raise RuntimeError("no keyframes to optimise against")
        self.iteration += 1
        it = self.iteration
        if keyframe is None:
            keyframe = self.map.keyframes[int(self.rng.integers(len(self.map.keyframes)))]
        scene = self.map
        render = render_geometric(scene, keyframe.pose, self.cam, self.settings)
        feature_step = it % self.schedule.feature_update_period == 0 and self.weights.feat > 0
        if feature_step:
            render.feature = render_feature(scene, render.topk)
        res = compute_losses(render, keyframe.frame, self.weights)
        g = backward_geometric(scene, keyframe.pose, self.cam, self.settings,
                               res.grad_color, res.grad_depth, render)
        grads = g.as_dict()
        if feature_step and res.grad_feature is not None:
            grads["features"] = backward_feature(scene, render.topk, res.grad_feature)
        self.optimizer.step(scene, grads)
        np.clip(scene.colors, 0.0, 1.0, out=scene.colors)
        scene.quats[:] = quat_normalize(scene.quats) if len(scene) else scene.quats
        if feature_step:
            scene.features[:] = _normalize_rows(scene.features)
        update_contribution_stats(scene, render)
        pruned = 0
        if self.prune_enabled and it % self.schedule.prune_period == 0:
            pruned = len(self.prune())
        rec = LossRecord(it, res.total, res.geo, res.feat, feature_step, len(scene), pruned)
        self.history.append(rec)
        return rec

    def prune(self) -> np.ndarray:
        return prune_map(self.map, self.schedule.prune_resample_ratio, self.rng,
                         self.schedule.topk_count_threshold, self.optimizer)

    def evaluate(self, keyframe: Keyframe) -> LossResult:
        render = render_geometric(self.map, keyframe.pose, self.cam, self.settings)
        render.feature = render_feature(self.map, render.topk)
        return compute_losses(render, keyframe.frame, self.weights)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPLF"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_checkpoint(scene: SceneMap, path) -> None:
    """Little-endian float32 dump: header, then per Gaussian
    mean[3] logscale[3] quat[4] opacity_logit color[3] feature[D]."""
    D = scene.feature_dim
    rows = np.concatenate([scene.means, scene.log_scales, scene.quats,
                           scene.opacity_logits[:, None], scene.colors, scene.features], axis=1)
    body = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, D, len(scene)))
        fh.write(body.tobytes())


def read_checkpoint(path) -> SceneMap:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, D, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    width = 14 + D
    expected = _HEADER.size + 4 * width * count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} Gaussians, got {len(data)}")
    rows = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, width)
    rows = rows.astype(np.float64)
    return SceneMap(D, means=rows[:, 0:3], log_scales=rows[:, 3:6], quats=rows[:, 6:10],
                    opacity_logits=rows[:, 10], colors=rows[:, 11:14], features=rows[:, 14:])
