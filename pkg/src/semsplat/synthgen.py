"""Synthetic rooms with exact colour, depth, feature and label ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Frame, Gaussian3D, Pose, logit, look_at, rotmat_to_quat
from .rasterizer import RenderSettings, render_geometric
from .scene import SceneMap

INVALID_LABEL = 255

_PALETTE = np.array([
    [0.80, 0.72, 0.60],
    [0.35, 0.45, 0.70],
    [0.90, 0.90, 0.85],
    [0.75, 0.25, 0.20],
    [0.30, 0.60, 0.35],
    [0.55, 0.35, 0.65],
    [0.85, 0.65, 0.20],
    [0.25, 0.55, 0.60],
])


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    label: str = "object"


@dataclass(frozen=True)
class SceneSpec:
    """Room layout: an axis-aligned box room (z up) plus box objects."""

    room: tuple = (4.0, 4.0, 3.0)
    class_names: tuple = ("wall", "floor", "ceiling", "object")
    feature_dim: int = 16
    density: float = 12.0   # Gaussians per unit length along each surface axis
    objects: tuple = (Box((2.0, 2.0, 0.4), (0.8, 0.8, 0.8), "object"),)
    surfaces: tuple | None = None  # subset of surface names; None = all
    texture_amplitude: float = 0.12
    opacity: float = 0.99
    seed: int = 0


@dataclass
class SyntheticScene:
    gaussians: SceneMap
    class_ids: np.ndarray
    class_embeddings: np.ndarray
    class_names: tuple
    spec: SceneSpec = field(default=None)

    @property
    def gt_gaussians(self) -> list[Gaussian3D]:
        return list(self.gaussians)

    @property
    def room(self):
        return np.asarray(self.spec.room, dtype=np.float64)

    @property
    def center(self):
        return self.room / 2


def orthogonal_embeddings(n_classes: int, dim: int, rng) -> np.ndarray:
    """``n_classes`` mutually orthogonal unit vectors (rows), exactly representable in float32."""
    if dim < n_classes:
        raise ValueError(f"feature dimension {dim} is smaller than the class count {n_classes}")
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    return q.T.astype(np.float32).astype(np.float64)


def _room_surfaces(room):
    """(name, origin, u-axis, v-axis, semantic) for the six room faces; normals point inwards."""
    X, Y, Z = room
    e = np.eye(3)
    return [
        ("floor", np.zeros(3), e[0] * X, e[1] * Y, "floor"),
        ("ceiling", np.array([0, 0, Z]), e[1] * Y, e[0] * X, "ceiling"),
        ("wall_y0", np.zeros(3), e[2] * Z, e[0] * X, "wall"),
        ("wall_y1", np.array([0, Y, 0]), e[0] * X, e[2] * Z, "wall"),
        ("wall_x0", np.zeros(3), e[1] * Y, e[2] * Z, "wall"),
        ("wall_x1", np.array([X, 0, 0]), e[2] * Z, e[1] * Y, "wall"),
    ]


def _box_surfaces(box: Box, idx: int):
    c, s = np.asarray(box.center, float), np.asarray(box.size, float)
    lo = c - s / 2
    e = np.eye(3)
    out = []
    for axis in range(3):
        a1, a2 = [k for k in range(3) if k != axis]
        for side in (0, 1):
            if axis == 2 and side == 0:
                continue  # bottom face rests on the floor
            origin = lo.copy()
            origin[axis] += side * s[axis]
            out.append((f"box{idx}_{axis}{side}", origin, e[a1] * s[a1], e[a2] * s[a2], box.label))
    return out


def build_synthetic_scene(spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    """Tile every planar surface with flat Gaussians of a single class."""
    C, D = len(spec.class_names), spec.feature_dim
    rng = np.random.default_rng(spec.seed)
    emb = orthogonal_embeddings(C, D, rng)
    surfaces = _room_surfaces(spec.room)
    for i, box in enumerate(spec.objects):
        surfaces += _box_surfaces(box, i)
    if spec.surfaces is not None:
        surfaces = [s for s in surfaces if s[0] in spec.surfaces]
    means, scales, quats, colors, cls = [], [], [], [], []
    for k, (name, origin, u, v, semantic) in enumerate(surfaces):
        cid = spec.class_names.index(semantic) if semantic in spec.class_names else k % C
        lu, lv = np.linalg.norm(u), np.linalg.norm(v)
        nu = max(1, int(round(lu * spec.density)))
        nv = max(1, int(round(lv * spec.density)))
        su, sv = lu / nu, lv / nv
        a = (np.arange(nu) + 0.5) / nu
        b = (np.arange(nv) + 0.5) / nv
        A, B = np.meshgrid(a, b, indexing="ij")
        pts = origin + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
        R = np.stack([u / lu, v / lv, np.cross(u / lu, v / lv)], axis=1)
        q = rotmat_to_quat(R)
        phase = rng.uniform(0, 2 * np.pi, 3)
        base = _PALETTE[k % len(_PALETTE)]
        tex = np.sin(pts @ np.array([1.7, 2.3, 1.1]) + phase[0]) + 0.5 * np.sin(
            pts @ np.array([-2.1, 0.9, 2.9]) + phase[1])
        col = np.clip(base + spec.texture_amplitude * tex[:, None] * np.array([1.0, 0.8, 0.6]), 0, 1)
        n = len(pts)
        means.append(pts)
        scales.append(np.tile(np.log([0.6 * su, 0.6 * sv, 0.002]), (n, 1)))
        quats.append(np.tile(q, (n, 1)))
        colors.append(col)
        cls.append(np.full(n, cid))
    cls = np.concatenate(cls)
    scene = SceneMap(D, means=np.concatenate(means), log_scales=np.concatenate(scales),
                     quats=np.concatenate(quats),
                     opacity_logits=np.full(len(cls), float(logit(spec.opacity))),
                     colors=np.concatenate(colors), features=emb[cls])
    return SyntheticScene(scene, cls, emb, tuple(spec.class_names), spec)


def generate_trajectory(kind: str, n: int, scene: SyntheticScene, loops: int = 1,
                        radius: float | None = None, height: float | None = None) -> list[Pose]:
    """Camera path inside the room.

    ``orbit``: equal azimuth steps on a circle around the room centre, looking
    at the centre. ``lawnmower``: three rows at constant orientation between
    opposing corners of an inset rectangle.
    """
    if n < 2:
        raise ValueError("need at least 2 poses")
    room = scene.room
    c = scene.center
    h = room[2] * 0.5 if height is None else height
    if kind == "orbit":
        r = 0.3 * min(room[0], room[1]) if radius is None else radius
        target = np.array([c[0], c[1], 0.4 * room[2]])
        poses = []
        for i in range(n):
            th = 2 * np.pi * loops * i / n
            eye = np.array([c[0] + r * np.cos(th), c[1] + r * np.sin(th), h])
            poses.append(look_at(eye, target))
        return poses
    if kind == "lawnmower":
        margin = 0.2 * min(room[0], room[1])
        x0, x1 = margin, room[0] - margin
        y0, y1 = margin, room[1] - margin
        ys = np.linspace(y0, y1, 3)
        corners = [(x0, ys[0]), (x1, ys[0]), (x1, ys[1]), (x0, ys[1]), (x0, ys[2]), (x1, ys[2])]
        pts = np.array([[x, y, h] for x, y in corners])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0], np.cumsum(seg)])
        s = np.linspace(0, cum[-1], n)
        path = np.stack([np.interp(s, cum, pts[:, k]) for k in range(3)], axis=1)
        fwd = np.array([0.0, 1.0, -0.25])
        return [look_at(p, p + fwd) for p in path]
    raise ValueError(f"unknown trajectory kind {kind!r}; expected 'orbit' or 'lawnmower'")


def render_ground_truth(scene: SyntheticScene, poses, cam: CameraIntrinsics,
                        depth_noise: float = 0.0, seed: int = 0, fps: float = 30.0,
                        settings: RenderSettings | None = None) -> list[Frame]:
    """Colour, depth, feature and label images for each pose.

    Labels come from the top-weight Gaussian (K=1); the feature of a pixel is
    its label's class embedding; uncovered pixels get depth 0, a zero
    feature and ``INVALID_LABEL``.
    """
    settings = settings or RenderSettings(K=1)
    if settings.K != 1:
        settings = RenderSettings(1, settings.transmittance_floor, settings.background_color,
                                  settings.tile_size, settings.alpha_min, settings.alpha_max,
                                  settings.dilation)
    rng = np.random.default_rng(seed)
    emb32 = scene.class_embeddings.astype(np.float32)
    frames = []
    for i, pose in enumerate(poses):
        out = render_geometric(scene.gaussians, pose, cam, settings)
        covered = out.topk.count > 0
        top = out.topk.index[..., 0]
        label = np.full(cam.shape, INVALID_LABEL, dtype=np.uint8)
        label[covered] = scene.class_ids[top[covered]]
        depth = np.where(covered, out.depth, 0.0)
        if depth_noise > 0:
            noise = rng.normal(0.0, depth_noise, depth.shape)
            depth = np.where(covered, np.maximum(depth + noise, 1e-3), 0.0)
        feat = np.zeros(cam.shape + (scene.class_embeddings.shape[1],), dtype=np.float32)
        feat[covered] = emb32[label[covered]]
        frames.append(Frame(i / fps, np.clip(out.color, 0, 1), depth, feat, label))
    return frames
