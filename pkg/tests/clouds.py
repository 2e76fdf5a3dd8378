"""Synthetic point clouds for registration tests."""

import numpy as np

from semsplat.geometry import Pose, se3_exp
from semsplat.tracker import SourceCloud, estimate_covariances


def surface_cloud(rng, n=1500):
    """Points on a bumpy floor, a back wall and a side wall (well-constrained in all 6 DoF)."""
    k = n // 3
    x, y = rng.uniform(-1, 1, (2, k))
    floor = np.column_stack([x, y, 0.1 * np.sin(3 * x) * np.cos(2 * y)])
    x, z = rng.uniform(-1, 1, (2, k))
    back = np.column_stack([x, np.full(k, 1.0) + 0.05 * np.sin(4 * z), z + 1])
    y, z = rng.uniform(-1, 1, (2, n - 2 * k))
    side = np.column_stack([np.full(n - 2 * k, -1.0) + 0.05 * np.cos(3 * y), y, z + 1])
    return np.concatenate([floor, back, side])


def source_from_world(world, pose: Pose, k=10) -> SourceCloud:
    pos = pose.apply(world)
    n = len(pos)
    return SourceCloud(pos, estimate_covariances(pos, k), np.zeros((n, 2), dtype=np.int64),
                       np.zeros((n, 1)), np.zeros((n, 3)))


def random_motion(rng, max_deg=10.0, max_trans=0.1) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    return se3_exp(np.concatenate([axis * np.radians(rng.uniform(0, max_deg)),
                                   t * rng.uniform(0, max_trans)]))
