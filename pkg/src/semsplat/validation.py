"""Input checks shared by the estimator and the command-line driver."""

from __future__ import annotations

import numbers

import numpy as np

from .geometry import CameraIntrinsics, Frame, Pose


def check_frames(frames, feature_dim: int | None = None) -> list[Frame]:
    """Return ``frames`` as a list after checking they share one image size
    and feature dimension and have increasing timestamps."""
    if isinstance(frames, Frame):
        frames = [frames]
    frames = list(frames)
    if not frames:
        raise ValueError("expected at least one frame")
    for i, f in enumerate(frames):
        if not isinstance(f, Frame):
            raise TypeError(f"item {i} is {type(f).__name__}, expected Frame")
    shape, D = frames[0].shape, frames[0].feature_dim
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"frame {i} has size {f.shape}, frame 0 has {shape}")
        if f.feature_dim != D:
            raise ValueError(f"frame {i} has feature dimension {f.feature_dim}, frame 0 has {D}")
    if feature_dim is not None and D != feature_dim:
        raise ValueError(f"frames carry {D}-dimensional features, expected {feature_dim}")
    stamps = np.array([f.timestamp for f in frames])
    if np.any(np.diff(stamps) <= 0):
        raise ValueError("frame timestamps must be strictly increasing")
    return frames


def check_intrinsics(cam, shape) -> CameraIntrinsics:
    if not isinstance(cam, CameraIntrinsics):
        raise TypeError(f"intrinsics must be CameraIntrinsics, got {type(cam).__name__}")
    if cam.shape != tuple(shape):
        raise ValueError(f"intrinsics describe {cam.shape} images, frames are {tuple(shape)}")
    return cam


def check_poses(poses, n: int | None = None, name: str = "poses") -> list[Pose]:
    poses = [poses] if isinstance(poses, Pose) else list(poses)
    for i, p in enumerate(poses):
        if not isinstance(p, Pose):
            raise TypeError(f"{name}[{i}] is {type(p).__name__}, expected Pose")
    if n is not None and len(poses) != n:
        raise ValueError(f"expected {n} {name}, got {len(poses)}")
    return poses


def check_positive(value, name: str, integer: bool = False, allow_zero: bool = False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a number'}, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value!r}")
    return value


def check_in_range(value, name: str, lo: float, hi: float, lo_open=False, hi_open=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a number, got {value!r}")
    bad = (value < lo or value > hi or (lo_open and value == lo) or (hi_open and value == hi))
    if bad:
        lb, rb = "(" if lo_open else "[", ")" if hi_open else "]"
        raise ValueError(f"{name} must lie in {lb}{lo}, {hi}{rb}, got {value!r}")
    return value
