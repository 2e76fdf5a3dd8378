"""Trajectory, image and segmentation metrics plus feature queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose
from .imaging import psnr, ssim

__all__ = [
    "INVALID_LABEL",
    "MetricsReport",
    "Trajectory",
    "associate",
    "ate_rmse",
    "cosine_similarity",
    "psnr",
    "query_mask",
    "segment_by_query",
    "semantic_metrics",
    "ssim",
]

INVALID_LABEL = 255


@dataclass
class Trajectory:
    """Timestamped world-to-camera poses."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).ravel()
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.camera_center() for p in self.poses])

    def length(self) -> float:
        """Total path length of the camera centres."""
        p = self.positions
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0


def associate(a: np.ndarray, b: np.ndarray, max_dt: float = 0.02):
    """Greedy nearest-timestamp matching; returns index pairs (i into a, j into b)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) == 0 or len(b) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(b)
    bs = b[order]
    pos = np.clip(np.searchsorted(bs, a), 1, len(bs) - 1) if len(bs) > 1 else np.zeros(len(a), int)
    left = np.maximum(pos - 1, 0)
    pick = np.where(np.abs(bs[left] - a) <= np.abs(bs[pos] - a), left, pos)
    dt = np.abs(bs[pick] - a)
    ok = dt <= max_dt
    ii, jj = np.flatnonzero(ok), order[pick[ok]]
    # each ground-truth stamp is used at most once: keep the closest claimant
    best = {}
    for i, j in zip(ii, jj):
        if j not in best or abs(a[i] - b[j]) < abs(a[best[j]] - b[j]):
            best[j] = i
    jj = np.array(sorted(best), dtype=int)
    ii = np.array([best[j] for j in jj], dtype=int)
    return ii, jj


def ate_rmse(estimated: Trajectory, groundtruth: Trajectory, max_dt: float = 0.02,
             align: bool = True) -> float:
    """RMSE of camera-centre residuals after rigid (scale 1) alignment."""
    i, j = associate(estimated.timestamps, groundtruth.timestamps, max_dt)
    if len(i) < 3:
        raise ValueError(f"need at least 3 associated poses, found {len(i)}")
    est = estimated.positions[i]
    gt = groundtruth.positions[j]
    if align:
        mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
        if np.allclose(est - mu_e, 0) or np.allclose(gt - mu_g, 0):
            est = est - mu_e + mu_g
        else:
            rot, _ = Rotation.align_vectors(gt - mu_g, est - mu_e)
            est = rot.apply(est - mu_e) + mu_g
    res = est - gt
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def cosine_similarity(feature_image, embeddings) -> np.ndarray:
    """(H, W, C) cosine similarity of every pixel to every embedding; 0 where the pixel is zero."""
    F = np.asarray(feature_image, dtype=np.float64)
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    fn = np.linalg.norm(F, axis=-1, keepdims=True)
    en = np.linalg.norm(E, axis=-1)
    Fu = np.divide(F, fn, out=np.zeros_like(F), where=fn > 0)
    Eu = E / np.where(en > 0, en, 1.0)[:, None]
    return Fu @ Eu.T


def segment_by_query(feature_image, class_embeddings) -> np.ndarray:
    """Per-pixel argmax of cosine similarity; zero-feature pixels are ``INVALID_LABEL``."""
    F = np.asarray(feature_image)
    sim = cosine_similarity(F, class_embeddings)
    labels = np.argmax(sim, axis=-1).astype(np.uint8)
    labels[~np.any(F != 0, axis=-1)] = INVALID_LABEL
    return labels


def query_mask(feature_image, embedding, threshold: float = 0.5):
    """Similarity heat image for one query embedding and its thresholded mask."""
    heat = cosine_similarity(feature_image, np.asarray(embedding)[None])[..., 0]
    return heat, heat >= threshold


def semantic_metrics(pred, gt, invalid: int = INVALID_LABEL):
    """Pixel accuracy and mIoU over pixels with a valid ground-truth label.

    Classes absent from both prediction and ground truth do not enter the mean.
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"label images differ in size: {pred.shape} vs {gt.shape}")
    valid = gt != invalid
    if not valid.any():
        raise ValueError("ground truth has no valid pixels")
    p, g = pred[valid], gt[valid]
    accuracy = float(np.mean(p == g))
    ious = []
    for c in np.union1d(np.unique(g), np.unique(p[p != invalid])):
        inter = np.sum((p == c) & (g == c))
        union = np.sum((p == c) | (g == c))
        ious.append(inter / union)
    return accuracy, float(np.mean(ious))


@dataclass
class MetricsReport:
    ate_rmse: float
    psnr: float
    ssim: float
    pixel_accuracy: float
    miou: float
    gaussian_count: int
    extra: dict | None = None

    def as_dict(self) -> dict:
        out = {"ate_rmse": self.ate_rmse, "psnr": self.psnr, "ssim": self.ssim,
               "pixel_accuracy": self.pixel_accuracy, "miou": self.miou,
               "gaussian_count": self.gaussian_count}
        out.update(self.extra or {})
        return out

    def to_text(self) -> str:
        return format_report(self.as_dict())


def format_report(items: dict) -> str:
    """One ``key=value`` per line; floats in round-trip ``repr`` form."""
    lines = []
    for k, v in items.items():
        if isinstance(v, (float, np.floating)):
            v = repr(float(v))
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def trajectory_from_poses(poses, timestamps) -> Trajectory:
    return Trajectory(np.asarray(timestamps, float), [p if isinstance(p, Pose) else Pose(*p) for p in poses])
