"""Feature-pass throughput: Top-K reuse versus conventional full blending."""

from __future__ import annotations

import time

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .rasterizer import RenderSettings, render_feature, render_feature_full, render_geometric
from .scene import SceneMap


def random_scene(n: int, feature_dim: int, seed: int = 0) -> SceneMap:
    """``n`` random Gaussians in a frustum-shaped slab in front of the identity camera."""
    rng = np.random.default_rng(seed)
    return SceneMap(
        feature_dim,
        means=rng.uniform([-2, -2, 2], [2, 2, 6], (n, 3)),
        log_scales=np.log(rng.uniform(0.02, 0.08, (n, 3))),
        quats=rng.normal(size=(n, 4)),
        opacity_logits=rng.normal(0, 1, n),
        colors=rng.uniform(size=(n, 3)),
        features=rng.normal(size=(n, feature_dim)),
    )


def _best_of(fn, repeats):
    fn()  # warm-up (JIT compilation, allocation)
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def feature_pass_times(n: int = 10_000, size: int = 256, dims=(16, 64), ks=(1, 3, 5, 10),
                       repeats: int = 5, seed: int = 0) -> list[tuple[int, str, float]]:
    """Best-of-``repeats`` seconds per feature pass as ``(D, K, seconds)`` rows.

    For Top-K the pass reuses the records of a preceding geometric render;
    the ``full`` row is a complete alpha-blended feature sweep.
    """
    cam = CameraIntrinsics.from_fov(size, size, 70.0)
    pose = Pose.identity()
    rows = []
    for D in dims:
        scene = random_scene(n, D, seed)
        buf = np.empty((size, size, D))
        for K in ks:
            settings = RenderSettings(K=K)
            topk = render_geometric(scene, pose, cam, settings).topk
            rows.append((D, str(K), _best_of(lambda: render_feature(scene, topk, buf), repeats)))
        rows.append((D, "full", _best_of(lambda: render_feature_full(scene, pose, cam), repeats)))
    return rows
