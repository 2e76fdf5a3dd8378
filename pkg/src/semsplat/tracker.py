"""Frame-to-map tracking with generalized ICP and keyframe selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Frame, Pose, perturb_left, se3_compose, se3_exp
from .losses import LossWeights, compute_losses
from .rasterizer import RenderSettings, backward_geometric, render_geometric

PLANE_EPSILON = 1e-3


@dataclass(frozen=True)
class SourcePoint:
    position: np.ndarray
    covariance: np.ndarray
    pixel: tuple
    feature: np.ndarray
    color: np.ndarray


@dataclass
class SourceCloud:
    """Back-projected points of one frame, stored column-wise."""

    positions: np.ndarray    # (n, 3) camera frame
    covariances: np.ndarray  # (n, 3, 3)
    pixels: np.ndarray       # (n, 2) integer (u, v)
    features: np.ndarray     # (n, D)
    colors: np.ndarray       # (n, 3)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> SourcePoint:
        return SourcePoint(self.positions[i], self.covariances[i], tuple(self.pixels[i]),
                           self.features[i], self.colors[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass(frozen=True)
class TrackerParams:
    corr_distance: float = 0.1        # correspondence gate
    overlap_distance: float = 0.05
    max_iterations: int = 30
    tolerance: float = 1e-6
    min_correspondences: int = 10
    covariance_k: int = 10
    max_halvings: int = 10


@dataclass
class TrackResult:
    pose: Pose
    correspondence_distances: np.ndarray
    overlap_ratio: float
    converged: bool
    iterations: int
    cost_history: list = field(default_factory=list)


def estimate_covariances(points, k: int = 10, epsilon: float = PLANE_EPSILON) -> np.ndarray:
    """Plane-regularised covariance of each point's k-neighbourhood.

    Eigenvalues are replaced by ``(1, 1, epsilon)`` so that every covariance
    describes a thin disc aligned with the local surface.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {len(pts)}")
    _, nn = cKDTree(pts).query(pts, k=k + 1)
    nb = pts[nn]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / (k + 1)
    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    lam = np.array([epsilon, 1.0, 1.0])
    return np.einsum("nij,j,nkj->nik", vecs, lam, vecs)


def depth_edges(depth, max_jump: float) -> np.ndarray:
    """Pixels whose depth differs from a 4-neighbour by more than ``max_jump``
    times their own depth (silhouettes, where composited depth is a mix of
    foreground and background)."""
    d = np.asarray(depth, dtype=np.float64)
    p = np.pad(d, 1, mode="edge")
    jump = np.zeros_like(d)
    for nb in (p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]):
        jump = np.maximum(jump, np.where(nb > 0, np.abs(nb - d), 0.0))
    return jump > max_jump * d


def backproject_depth(frame: Frame, cam: CameraIntrinsics, stride: int = 4,
                      k: int = 10, max_depth_jump: float | None = None) -> SourceCloud:
    """One source point per valid depth pixel on a ``stride`` grid.

    With ``max_depth_jump`` set, pixels on depth discontinuities (see
    :func:`depth_edges`) are treated as invalid.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    vs, us = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
    us, vs = us.ravel(), vs.ravel()
    depth = np.asarray(frame.depth, dtype=np.float64)
    z = depth[vs, us]
    ok = z > 0
    if max_depth_jump is not None:
        ok &= ~depth_edges(depth, max_depth_jump)[vs, us]
    us, vs, z = us[ok], vs[ok], z[ok]
    D = frame.feature_dim
    if len(z) == 0:
        return SourceCloud(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 2), dtype=np.int64),
                           np.zeros((0, D)), np.zeros((0, 3)))
    pos = np.stack([z * (us - cam.cx) / cam.fx, z * (vs - cam.cy) / cam.fy, z], axis=1)
    if len(pos) > k:
        cov = estimate_covariances(pos, k)
    elif len(pos) >= 4:
        cov = estimate_covariances(pos, len(pos) - 1)
    else:
        cov = np.repeat(np.eye(3)[None], len(pos), axis=0)
    return SourceCloud(pos, cov, np.stack([us, vs], axis=1),
                       np.asarray(frame.feature_map, dtype=np.float64)[vs, us],
                       np.asarray(frame.color, dtype=np.float64)[vs, us])


class MapIndex:
    """Nearest-neighbour index over map means with GICP target covariances."""

    def __init__(self, means, k: int = 10):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 3)
        self.tree = cKDTree(self.means) if len(self.means) else None
        if len(self.means) > k:
            self.covariances = estimate_covariances(self.means, k)
        elif len(self.means) >= 4:
            self.covariances = estimate_covariances(self.means, len(self.means) - 1)
        else:
            self.covariances = np.repeat(np.eye(3)[None], len(self.means), axis=0)

    @classmethod
    def from_map(cls, scene, k: int = 10) -> "MapIndex":
        return cls(scene.means, k)

    def __len__(self):
        return len(self.means)

    def query(self, points, max_distance=np.inf):
        if self.tree is None:
            n = len(points)
            return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
        d, j = self.tree.query(points, distance_upper_bound=max_distance)
        j = np.where(np.isfinite(d), j, -1)
        return d, j


def _gicp_cost(world, src_cov, R, target_pts, target_cov):
    C = target_cov + R @ src_cov @ R.T
    M = np.linalg.inv(C)
    r = world - target_pts
    return float(np.einsum("ni,nij,nj->", r, M, r)), M, r


def gicp_align(source: SourceCloud, target, init: Pose,
               params: TrackerParams = TrackerParams()) -> TrackResult:
    """Estimate the world-to-camera pose aligning ``source`` to the map.

    ``target`` is a :class:`MapIndex` or anything with ``means`` (a map).
    Gauss-Newton on left-multiplied twists of the camera-to-world transform,
    with nearest-neighbour re-association every iteration and step halving
    so the per-iteration cost never increases.
    """
    index = target if isinstance(target, MapIndex) else MapIndex.from_map(target, params.covariance_k)
    src = source.positions
    n = len(src)
    if n == 0 or len(index) == 0:
        return TrackResult(init, np.full(n, np.inf), 0.0, False, 0)
    T = init.inverse()  # camera-to-world
    history = []
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        world = T.apply(src)
        d, j = index.query(world, params.corr_distance)
        ok = j >= 0
        if ok.sum() < params.min_correspondences:
            if it == 1:
                return TrackResult(init, _distances(index, init, src), 0.0, False, 0)
            break
        R = T.R
        w, scov = world[ok], source.covariances[ok]
        q, tcov = index.means[j[ok]], index.covariances[j[ok]]
        cost, M, r = _gicp_cost(w, scov, R, q, tcov)
        Jac = np.zeros((len(w), 3, 6))
        Jac[:, :, :3] = _skew_batch(-w)
        Jac[:, :, 3:] = np.eye(3)
        MJ = M @ Jac
        H = np.einsum("nki,nkj->ij", Jac, MJ)
        b = np.einsum("nki,nk->i", MJ, r)
        try:
            xi = -np.linalg.solve(H, b)
        except np.linalg.LinAlgError:
            break
        # step halving under fixed correspondences and fixed weights
        for _ in range(params.max_halvings):
            cand = se3_compose(se3_exp(xi), T)
            rc = cand.apply(src[ok]) - q
            new_cost = float(np.einsum("ni,nij,nj->", rc, M, rc))
            if new_cost <= cost:
                break
            xi = 0.5 * xi
        else:
            history.append((cost, cost))
            converged = True
            break
        history.append((cost, new_cost))
        T = cand
        if np.linalg.norm(xi) < params.tolerance:
            converged = True
            break
    pose = T.inverse()
    dist = _distances(index, pose, src)
    overlap = float(np.mean(dist < params.overlap_distance))
    return TrackResult(pose, dist, overlap, converged, it, history)


def _skew_batch(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _distances(index: MapIndex, pose: Pose, src):
    d, _ = index.query(pose.inverse().apply(src))
    return d


def keyframe_decision(result: TrackResult, threshold: float = 0.8) -> bool:
    """A frame becomes a keyframe when its overlap falls strictly below ``threshold``."""
    return result.overlap_ratio < threshold


def photometric_loss(scene, frame: Frame, pose: Pose, cam: CameraIntrinsics,
                     settings: RenderSettings, weights: LossWeights, with_grad: bool = False):
    render = render_geometric(scene, pose, cam, settings)
    res = compute_losses(render, frame, LossWeights(1.0, 0.0, weights.ssim_mix, weights.depth,
                                                    weights.second_term))
    if not with_grad:
        return res.geo
    g = backward_geometric(scene, pose, cam, settings, res.grad_color, res.grad_depth, render)
    return res.geo, g.pose


def refine_pose_photometric(scene, frame: Frame, pose: Pose, iters: int, cam: CameraIntrinsics,
                            settings: RenderSettings = RenderSettings(),
                            weights: LossWeights = LossWeights(),
                            step: float = 1e-3, max_halvings: int = 8) -> Pose:
    """Descend the geometric rendering loss over a left twist of ``pose``.

    Map parameters are left untouched. Every accepted step lowers the loss;
    if no improving step exists the input pose is returned.
    """
    loss, g = photometric_loss(scene, frame, pose, cam, settings, weights, True)
    for _ in range(iters):
        gn = np.linalg.norm(g)
        if gn == 0 or not np.isfinite(gn):
            break
        accepted = False
        for _ in range(max_halvings):
            cand = perturb_left(pose, -step * g / gn)
            cand_loss = photometric_loss(scene, frame, cand, cam, settings, weights)
            if cand_loss < loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        pose = cand
        loss, g = photometric_loss(scene, frame, pose, cam, settings, weights, True)
        step *= 1.5
    return pose
