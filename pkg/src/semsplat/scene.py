"""Structure-of-arrays container for the Gaussian map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Gaussian3D, quat_normalize

PARAM_GROUPS = ("means", "log_scales", "quats", "opacity_logits", "colors", "features")
_WIDTHS = {"means": 3, "log_scales": 3, "quats": 4, "opacity_logits": None, "colors": 3}


@dataclass(eq=False)
class SceneMap:
    """Mutable set of Gaussians plus pruning bookkeeping.

    Parameters live in per-group arrays (one row per Gaussian). ``generation``
    is bumped on every structural change (insertion or removal); Top-K records
    carry the generation they were rendered against.
    """

    feature_dim: int
    means: np.ndarray = None
    log_scales: np.ndarray = None
    quats: np.ndarray = None
    opacity_logits: np.ndarray = None
    colors: np.ndarray = None
    features: np.ndarray = None
    topk_count: np.ndarray = None
    max_contribution: np.ndarray = None
    generation: int = 0
    keyframes: list = field(default_factory=list)

    def __post_init__(self):
        D = int(self.feature_dim)
        if D < 1:
            raise ValueError("feature_dim must be >= 1")
        self.feature_dim = D
        self.means = _as2d(self.means, 3)
        n = len(self.means)
        self.log_scales = _as2d(self.log_scales, 3, n)
        self.quats = _as2d(self.quats, 4, n)
        self.opacity_logits = np.zeros(n) if self.opacity_logits is None else np.asarray(
            self.opacity_logits, dtype=np.float64).reshape(n).copy()
        self.colors = _as2d(self.colors, 3, n)
        self.features = _as2d(self.features, D, n)
        self.topk_count = (np.zeros(n, dtype=np.int64) if self.topk_count is None
                           else np.asarray(self.topk_count, dtype=np.int64).reshape(n).copy())
        self.max_contribution = (np.zeros(n) if self.max_contribution is None
                                 else np.asarray(self.max_contribution, dtype=np.float64).reshape(n).copy())

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls, feature_dim: int) -> "SceneMap":
        return cls(feature_dim)

    @classmethod
    def from_gaussians(cls, gaussians, feature_dim: int | None = None) -> "SceneMap":
        gaussians = list(gaussians)
        if feature_dim is None:
            if not gaussians:
                raise ValueError("feature_dim required for an empty list")
            feature_dim = len(gaussians[0].feature)
        if not gaussians:
            return cls(feature_dim)
        return cls(
            feature_dim,
            means=np.stack([g.mean for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            quats=np.stack([g.rotation for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            colors=np.stack([g.color for g in gaussians]),
            features=np.stack([g.feature for g in gaussians]),
            topk_count=np.array([g.topk_count for g in gaussians]),
            max_contribution=np.array([g.max_contribution for g in gaussians]),
        )

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.log_scales[i], self.quats[i], self.opacity_logits[i],
                          self.colors[i], self.features[i], int(self.topk_count[i]),
                          float(self.max_contribution[i]))

    def __iter__(self):
        return (self.gaussian(i) for i in range(len(self)))

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def append(self, means, log_scales, quats, opacity_logits, colors, features) -> int:
        means = _as2d(means, 3)
        n = len(means)
        if n == 0:
            return 0
        self.means = np.concatenate([self.means, means])
        self.log_scales = np.concatenate([self.log_scales, _as2d(log_scales, 3, n)])
        self.quats = np.concatenate([self.quats, quat_normalize(_as2d(quats, 4, n))])
        self.opacity_logits = np.concatenate(
            [self.opacity_logits, np.asarray(opacity_logits, dtype=np.float64).reshape(n)])
        self.colors = np.concatenate([self.colors, _as2d(colors, 3, n)])
        self.features = np.concatenate([self.features, _as2d(features, self.feature_dim, n)])
        self.topk_count = np.concatenate([self.topk_count, np.zeros(n, dtype=np.int64)])
        self.max_contribution = np.concatenate([self.max_contribution, np.zeros(n)])
        self.generation += 1
        return n

    def keep(self, mask) -> None:
        """Retain only rows where ``mask`` is true."""
        mask = np.asarray(mask, dtype=bool)
        if mask.all():
            return
        for name in PARAM_GROUPS + ("topk_count", "max_contribution"):
            setattr(self, name, getattr(self, name)[mask])
        self.generation += 1

    def copy(self) -> "SceneMap":
        out = SceneMap(self.feature_dim, **{k: v.copy() for k, v in self.params().items()},
                       topk_count=self.topk_count.copy(),
                       max_contribution=self.max_contribution.copy(),
                       generation=self.generation)
        out.keyframes = list(self.keyframes)
        return out

    def snapshot(self) -> "SceneMap":
        """Read-only copy safe to hand to another thread."""
        snap = self.copy()
        for name in PARAM_GROUPS:
            getattr(snap, name).setflags(write=False)
        return snap


def _as2d(a, width, n=None):
    if a is None:
        return np.zeros((0 if n is None else n, width))
    a = np.array(a, dtype=np.float64, copy=True)
    if a.size == 0:
        return np.zeros((0, width))
    a = a.reshape(-1, width)
    if n is not None and len(a) != n:
        raise ValueError(f"expected {n} rows, got {len(a)}")
    return a
