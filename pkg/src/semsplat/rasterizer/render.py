"""Dual rendering: alpha-blended colour/depth and Top-K feature images.

The geometric pass records, for every pixel, the K Gaussians with the largest
blending weights. The feature pass only reads those records, so its cost is
``O(H * W * K * D)`` regardless of how many Gaussians overlap a pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose, in_view_cone, quat_normalize, quat_to_rotmat, sigmoid
from . import _kernels


class StaleRecordError(RuntimeError):
    """A Top-K record references Gaussians of a different map generation."""


@dataclass(frozen=True)
class RenderSettings:
    K: int = 3
    transmittance_floor: float = 1e-4
    background_color: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    dilation: float = 0.3

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not (0.0 <= self.transmittance_floor < 1.0):
            raise ValueError("transmittance_floor must lie in [0, 1)")
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")
        if not (0.0 <= self.alpha_min < self.alpha_max < 1.0):
            raise ValueError("need 0 <= alpha_min < alpha_max < 1")


@dataclass
class TopKRecord:
    """Per-pixel (index, weight) pairs, weights in descending order."""

    index: np.ndarray   # (H, W, K) int64, -1 for empty slots
    weight: np.ndarray  # (H, W, K)
    count: np.ndarray   # (H, W) int64
    generation: int = -1
    n_gaussians: int = -1

    @property
    def K(self) -> int:
        return self.index.shape[-1]

    def selection_counts(self, n: int) -> np.ndarray:
        """How many pixels selected each Gaussian into their Top-K set."""
        idx = self.index[self.index >= 0]
        return np.bincount(idx, minlength=n)[:n]


@dataclass
class Projection:
    """Camera-space quantities for every Gaussian, kept for the backward pass."""

    t_cam: np.ndarray
    sigma_cam: np.ndarray
    J: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    radius: np.ndarray
    visible: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    W: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    topk: TopKRecord
    contributions: np.ndarray
    feature: np.ndarray | None = None
    generation: int = -1
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def final_transmittance(self):
        return self._cache["final_t"]


def project_all(scene, pose: Pose, cam: CameraIntrinsics, settings: RenderSettings) -> Projection:
    """Vectorised EWA projection of the whole map, culled to the depth range and view cone."""
    n = len(scene)
    W = pose.R
    t = scene.means @ W.T + pose.translation
    z = t[:, 2]
    valid = (z > cam.near) & (z < cam.far) & in_view_cone(t, cam)
    zs = np.where(valid, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * t[:, 0] / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * t[:, 1] / zs**2
    rot = quat_to_rotmat(quat_normalize(scene.quats)) if n else np.zeros((0, 3, 3))
    scale = np.exp(scene.log_scales)
    M = rot * scale[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)
    sigma_cam = W @ sigma @ W.T
    cov = J @ sigma_cam @ np.swapaxes(J, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    cov[:, 0, 0] += settings.dilation
    cov[:, 1, 1] += settings.dilation
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    ok = valid & (det > 0)
    det_s = np.where(ok, det, 1.0)
    conic = np.stack([c / det_s, -b / det_s, a / det_s], axis=1)
    mean2d = np.stack([cam.fx * t[:, 0] / zs + cam.cx, cam.fy * t[:, 1] / zs + cam.cy], axis=1)
    opacity = sigmoid(scene.opacity_logits)
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    if settings.alpha_min > 0:
        # beyond this radius alpha < alpha_min everywhere, so culling is exact
        ratio = np.where(opacity > settings.alpha_min, opacity / settings.alpha_min, 1.0)
        radius = np.sqrt(2.0 * np.maximum(lam, 0.0) * np.log(ratio))
        ok &= opacity >= settings.alpha_min
    else:
        radius = np.full(n, 1e9)  # no culling
    radius = np.where(ok, radius, 0.0)
    return Projection(t, sigma_cam, J, mean2d, cov, conic, z.copy(), opacity, radius, ok,
                      rot, scale, W)


def _depth_order(proj: Projection) -> np.ndarray:
    vis = np.flatnonzero(proj.visible)
    return vis[np.argsort(proj.depth[vis], kind="stable")]


def _check_tile_inputs(cam):
    return int(cam.width), int(cam.height)


def render_geometric(scene, pose: Pose, cam: CameraIntrinsics,
                     settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Alpha-blend colour and depth, recording per-pixel Top-K contributors.

    ``contributions[i]`` is the largest blending weight Gaussian ``i``
    attained over all pixels of this render.
    """
    width, height = _check_tile_inputs(cam)
    n = len(scene)
    proj = project_all(scene, pose, cam, settings)
    order = _depth_order(proj)
    offsets, ids = _kernels.bin_tiles(order, proj.mean2d, proj.radius, width, height,
                                      int(settings.tile_size))
    bg = np.asarray(settings.background_color, dtype=np.float64)
    colors = np.ascontiguousarray(scene.colors, dtype=np.float64)
    color, depth, final_t, n_last, tk_idx, tk_w, tk_n, contrib = _kernels.forward(
        offsets, ids, proj.mean2d, proj.conic, proj.opacity, colors, proj.depth, bg,
        width, height, int(settings.tile_size), int(settings.K),
        float(settings.transmittance_floor), float(settings.alpha_min),
        float(settings.alpha_max), n)
    topk = TopKRecord(tk_idx, tk_w, tk_n, scene.generation, n)
    cache = dict(proj=proj, offsets=offsets, ids=ids, final_t=final_t, n_last=n_last,
                 bg=bg, pose=pose, cam=cam, settings=settings)
    return RenderOutput(color, depth, 1.0 - final_t, topk, contrib,
                        generation=scene.generation, _cache=cache)


def _check_record(scene, topk: TopKRecord):
    n = len(scene)
    if topk.count.size and topk.count.max() > 0:
        hi = int(topk.index.max())
        if hi >= n:
            raise StaleRecordError(
                f"Top-K record references Gaussian {hi} but the map holds {n}")
    if topk.generation >= 0 and topk.generation != scene.generation:
        raise StaleRecordError(
            f"Top-K record is from generation {topk.generation}, map is at {scene.generation}")


def render_feature(scene, topk: TopKRecord, out: np.ndarray | None = None) -> np.ndarray:
    """Top-K feature image: per pixel ``sum_k (w_k / sum_j w_j) f_k``; zero where empty.

    ``out`` may be a preallocated ``(H, W, D)`` float64 buffer to write into.
    """
    _check_record(scene, topk)
    feats = np.ascontiguousarray(scene.features, dtype=np.float64)
    H, W = topk.count.shape
    if out is None:
        out = np.empty((H, W, feats.shape[1]))
    elif out.shape != (H, W, feats.shape[1]) or out.dtype != np.float64:
        raise ValueError("out buffer has the wrong shape or dtype")
    return _kernels.feature_topk(topk.index, topk.weight, topk.count, feats, out)


def render_feature_full(scene, pose: Pose, cam: CameraIntrinsics,
                        settings: RenderSettings = RenderSettings()):
    """Conventional alpha-blended feature image.

    Returns ``(F, wsum)`` with ``F = sum_i w_i f_i`` (not normalised) and
    ``wsum = sum_i w_i`` per pixel. Used as the baseline against Top-K.
    """
    width, height = _check_tile_inputs(cam)
    proj = project_all(scene, pose, cam, settings)
    order = _depth_order(proj)
    offsets, ids = _kernels.bin_tiles(order, proj.mean2d, proj.radius, width, height,
                                      int(settings.tile_size))
    feats = np.ascontiguousarray(scene.features, dtype=np.float64)
    return _kernels.feature_full(offsets, ids, proj.mean2d, proj.conic, proj.opacity, feats,
                                 width, height, int(settings.tile_size),
                                 float(settings.transmittance_floor),
                                 float(settings.alpha_min), float(settings.alpha_max))


@dataclass
class GeometricGradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    pose: np.ndarray  # twist (omega, v) for a left perturbation of the pose

    def as_dict(self):
        return dict(means=self.means, log_scales=self.log_scales, quats=self.quats,
                    opacity_logits=self.opacity_logits, colors=self.colors)


# d R / d (w, x, y, z) for the unit quaternion, as functions of q
def _dR_dq(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dw = np.stack([o, -2 * z, 2 * y, 2 * z, o, -2 * x, -2 * y, 2 * x, o], 1)
    dx = np.stack([o, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], 1)
    dy = np.stack([-4 * y, 2 * x, 2 * w, 2 * x, o, 2 * z, -2 * w, 2 * z, -4 * y], 1)
    dz = np.stack([-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, o], 1)
    return np.stack([dw, dx, dy, dz], 1).reshape(-1, 4, 3, 3)


def _chain_projection(scene, proj: Projection, cam: CameraIntrinsics, g_mean2d, g_conic,
                      g_depth, g_opac, g_color) -> GeometricGradients:
    vis = proj.visible
    n = len(scene)
    conic = np.zeros((n, 2, 2))
    conic[:, 0, 0] = proj.conic[:, 0]
    conic[:, 0, 1] = conic[:, 1, 0] = proj.conic[:, 1]
    conic[:, 1, 1] = proj.conic[:, 2]
    G = np.zeros((n, 2, 2))
    G[:, 0, 0] = g_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conic[:, 1]
    G[:, 1, 1] = g_conic[:, 2]
    g_cov = -conic @ G @ conic
    J = proj.J
    g_sigma_cam = np.swapaxes(J, 1, 2) @ g_cov @ J
    g_J = 2.0 * g_cov @ J @ proj.sigma_cam

    t = proj.t_cam
    z = np.where(vis, t[:, 2], 1.0)
    x, y = t[:, 0], t[:, 1]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_mean2d[:, 0] * fx / z + g_J[:, 0, 2] * (-fx / z**2)
    g_t[:, 1] = g_mean2d[:, 1] * fy / z + g_J[:, 1, 2] * (-fy / z**2)
    g_t[:, 2] = (g_mean2d[:, 0] * (-fx * x / z**2) + g_mean2d[:, 1] * (-fy * y / z**2)
                 + g_J[:, 0, 0] * (-fx / z**2) + g_J[:, 0, 2] * (2 * fx * x / z**3)
                 + g_J[:, 1, 1] * (-fy / z**2) + g_J[:, 1, 2] * (2 * fy * y / z**3)
                 + g_depth)
    g_t[~vis] = 0.0
    g_sigma_cam[~vis] = 0.0

    W = proj.W
    g_means = g_t @ W
    g_sigma = W.T @ g_sigma_cam @ W
    R, s = proj.rot, proj.scale
    M = R * s[:, None, :]
    g_M = 2.0 * g_sigma @ M
    g_s = np.einsum("nrk,nrk->nk", R, g_M)
    g_log_scales = g_s * s
    g_R = g_M * s[:, None, :]
    qn = quat_normalize(scene.quats) if n else np.zeros((0, 4))
    g_qhat = np.einsum("nkij,nij->nk", _dR_dq(qn), g_R)
    qnorm = np.linalg.norm(scene.quats, axis=1, keepdims=True)
    g_quats = (g_qhat - qn * np.sum(qn * g_qhat, axis=1, keepdims=True)) / np.where(qnorm > 0, qnorm, 1.0)

    op = proj.opacity
    g_logits = np.where(vis, g_opac * op * (1.0 - op), 0.0)

    # left-perturbation twist of the world-to-camera pose
    A = proj.sigma_cam @ g_sigma_cam - g_sigma_cam @ proj.sigma_cam
    g_omega = np.cross(t, g_t).sum(0) + np.stack(
        [A[:, 1, 2] - A[:, 2, 1], A[:, 2, 0] - A[:, 0, 2], A[:, 0, 1] - A[:, 1, 0]], 1).sum(0)
    g_pose = np.concatenate([g_omega, g_t.sum(0)])
    return GeometricGradients(g_means, g_log_scales, g_quats, g_logits,
                              np.where(vis[:, None], g_color, 0.0), g_pose)


def backward_geometric(scene, pose: Pose, cam: CameraIntrinsics, settings: RenderSettings,
                       grad_color, grad_depth, render: RenderOutput | None = None
                       ) -> GeometricGradients:
    """Gradients of a scalar loss w.r.t. every geometric parameter and the pose.

    ``grad_color`` (H, W, 3) and ``grad_depth`` (H, W) are the loss gradients
    w.r.t. the rendered images. Pass the forward ``render`` to skip re-running it.
    """
    if render is None or render._cache.get("pose") is not pose:
        render = render_geometric(scene, pose, cam, settings)
    c = render._cache
    proj = c["proj"]
    n = len(scene)
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    grad_depth = np.ascontiguousarray(grad_depth, dtype=np.float64)
    if grad_color.shape != (cam.height, cam.width, 3) or grad_depth.shape != (cam.height, cam.width):
        raise ValueError("upstream gradient shapes do not match the camera")
    g_color, g_opac, g_mean2d, g_conic, g_depth = _kernels.backward(
        c["offsets"], c["ids"], proj.mean2d, proj.conic, proj.opacity,
        np.ascontiguousarray(scene.colors, dtype=np.float64), proj.depth, c["bg"],
        cam.width, cam.height, int(settings.tile_size), float(settings.alpha_min),
        float(settings.alpha_max), c["final_t"], c["n_last"], grad_color, grad_depth, n)
    return _chain_projection(scene, proj, cam, g_mean2d, g_conic, g_depth, g_opac, g_color)


def backward_feature(scene, topk: TopKRecord, grad_feature) -> np.ndarray:
    """Feature gradients; blending weights are treated as constants."""
    _check_record(scene, topk)
    grad_feature = np.ascontiguousarray(grad_feature, dtype=np.float64)
    if grad_feature.shape[:2] != topk.count.shape:
        raise ValueError("grad_feature does not match the record's image size")
    return _kernels.feature_topk_backward(topk.index, topk.weight, topk.count, grad_feature,
                                          len(scene))
