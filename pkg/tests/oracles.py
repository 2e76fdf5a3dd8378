"""Slow, independent reference implementations used by the tests."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from semsplat.geometry import CameraIntrinsics, Gaussian3D, Pose, project_gaussian
from semsplat.scene import SceneMap


def brute_render(scene: SceneMap, pose: Pose, cam: CameraIntrinsics, bg=(0, 0, 0),
                 alpha_min=1 / 255, alpha_max=0.999, dilation=0.3):
    """Per-pixel front-to-back blend with no tiles, no culling radius and no early stop.

    Returns (color, depth, final transmittance, weights) where ``weights`` is
    an (H, W, n) array of per-Gaussian blending weights.
    """
    n = len(scene)
    projs = [project_gaussian(scene.gaussian(i), pose, cam, dilation) for i in range(n)]
    vis = [i for i in range(n) if projs[i].visible]
    vis.sort(key=lambda i: projs[i].depth)
    H, W = cam.shape
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    final_t = np.ones((H, W))
    weights = np.zeros((H, W, n))
    opac = 1 / (1 + np.exp(-scene.opacity_logits))
    inv = {i: np.linalg.inv(projs[i].cov2d) for i in vis}
    for v in range(H):
        for u in range(W):
            T = 1.0
            for i in vis:
                d = np.array([u, v]) - projs[i].mean2d
                a = min(alpha_max, opac[i] * np.exp(-0.5 * d @ inv[i] @ d))
                if a < alpha_min:
                    continue
                w = a * T
                weights[v, u, i] = w
                color[v, u] += w * scene.colors[i]
                depth[v, u] += w * projs[i].depth
                T *= 1 - a
            color[v, u] += T * np.asarray(bg)
            final_t[v, u] = T
    return color, depth, final_t, weights


def central_difference(f, x, step=1e-4):
    """Gradient of scalar ``f`` at array ``x`` by central differences (x restored afterwards)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + step
        fp = f()
        flat[j] = old - step
        fm = f()
        flat[j] = old
        gf[j] = (fp - fm) / (2 * step)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def survival_oracle(scores, n_keep: int) -> np.ndarray:
    """Exact marginal survival probabilities of successive proportional draws
    without replacement; zero-score items are drawn uniformly once all positive
    mass is gone. Enumerates every draw sequence (small inputs only)."""
    s = [Fraction(float(x)) for x in scores]
    n = len(s)
    marg = [Fraction(0)] * n

    def walk(chosen, prob):
        if len(chosen) == n_keep:
            for i in chosen:
                marg[i] += prob
            return
        rest = [i for i in range(n) if i not in chosen]
        mass = sum(s[i] for i in rest)
        for i in rest:
            p = s[i] / mass if mass > 0 else Fraction(1, len(rest))
            if p > 0:
                walk(chosen + [i], prob * p)

    walk([], Fraction(1))
    return np.array([float(m) for m in marg])


def random_scene(rng, n, feature_dim=4, depth=(1.5, 4.0), spread=0.6, scale=(0.05, 0.25),
                 opacity=(0.2, 0.95)) -> SceneMap:
    """Random Gaussians in front of the identity camera."""
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None]
    feats = rng.normal(size=(n, feature_dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    op = rng.uniform(*opacity, n)
    return SceneMap(feature_dim, means=np.column_stack([xy, z]),
                    log_scales=np.log(rng.uniform(*scale, (n, 3))),
                    quats=rng.normal(size=(n, 4)), opacity_logits=np.log(op / (1 - op)),
                    colors=rng.uniform(size=(n, 3)), features=feats)


def single_gaussian(mean, scale=0.1, opacity=0.5, color=(1, 0, 0), feature=(1.0, 0, 0, 0)):
    g = Gaussian3D(mean=np.asarray(mean, float), log_scale=np.log(np.full(3, scale)),
                   rotation=np.array([1.0, 0, 0, 0]), opacity_logit=float(np.log(opacity / (1 - opacity))),
                   color=np.asarray(color, float), feature=np.asarray(feature, float))
    return g
