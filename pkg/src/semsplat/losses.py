"""Mapping objective: geometric (colour + depth) and semantic reconstruction terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ssim


@dataclass(frozen=True)
class LossWeights:
    geo: float = 1.0
    feat: float = 1.0
    ssim_mix: float = 0.2      # weight of the second colour term
    depth: float = 1.0
    second_term: str = "dssim"  # "dssim" or "l1"

    def __post_init__(self):
        for name in ("geo", "feat", "ssim_mix", "depth"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.ssim_mix > 1:
            raise ValueError("ssim_mix must be <= 1")
        if self.second_term not in ("dssim", "l1"):
            raise ValueError(f"unknown second colour term {self.second_term!r}")


@dataclass
class LossResult:
    total: float
    geo: float
    feat: float
    grad_color: np.ndarray
    grad_depth: np.ndarray
    grad_feature: np.ndarray | None


def _masked_l1(pred, target, mask):
    """Mean |pred - target| over masked entries and its gradient."""
    diff = pred - target
    count = mask.sum() * (pred.shape[-1] if pred.ndim == 3 else 1)
    if count == 0:
        return 0.0, np.zeros_like(pred)
    m = mask[..., None] if pred.ndim == 3 else mask
    value = float(np.abs(diff * m).sum() / count)
    return value, np.sign(diff) * m / count


def compute_losses(render, frame, weights: LossWeights = LossWeights(),
                   feature: np.ndarray | None = None) -> LossResult:
    """Evaluate the weighted objective of a render against a frame.

    The feature term is included only when a feature image is available
    (``feature`` argument or ``render.feature``) and ``weights.feat > 0``.
    Depth is compared only where the frame has valid (nonzero) depth;
    features only where the target feature is nonzero.
    """
    color = np.asarray(render.color, dtype=np.float64)
    depth = np.asarray(render.depth, dtype=np.float64)
    gt_c = np.asarray(frame.color, dtype=np.float64)
    gt_d = np.asarray(frame.depth, dtype=np.float64)
    if color.shape != gt_c.shape or depth.shape != gt_d.shape:
        raise ValueError(f"render {color.shape}/{depth.shape} does not match frame "
                         f"{gt_c.shape}/{gt_d.shape}")
    full = np.ones(depth.shape, dtype=bool)
    l1c, g_l1c = _masked_l1(color, gt_c, full)
    lam1 = weights.ssim_mix
    if weights.second_term == "dssim" and lam1 > 0:
        s, g_s = ssim(color, gt_c, crop=False, return_grad=True)
        second, g_second = 1.0 - s, -g_s
    else:
        second, g_second = l1c, g_l1c
    l1d, g_l1d = _masked_l1(depth, gt_d, gt_d > 0)
    geo = (1 - lam1) * l1c + lam1 * second + weights.depth * l1d
    g_color = weights.geo * ((1 - lam1) * g_l1c + lam1 * g_second)
    g_depth = weights.geo * weights.depth * g_l1d

    F = feature if feature is not None else render.feature
    feat, g_feat = 0.0, None
    if F is not None and weights.feat > 0:
        gt_f = np.asarray(frame.feature_map, dtype=np.float64)
        if F.shape != gt_f.shape:
            raise ValueError(f"feature image {F.shape} does not match frame {gt_f.shape}")
        valid = np.any(gt_f != 0, axis=-1)
        feat, g_feat = _masked_l1(np.asarray(F, dtype=np.float64), gt_f, valid)
        g_feat = weights.feat * g_feat
    total = weights.geo * geo + weights.feat * feat
    return LossResult(total, geo, feat, g_color, g_depth, g_feat)
