"""Differentiable software rasterizer for feature-carrying Gaussians."""

from .render import (
    GeometricGradients,
    Projection,
    RenderOutput,
    RenderSettings,
    StaleRecordError,
    TopKRecord,
    backward_feature,
    backward_geometric,
    project_all,
    render_feature,
    render_feature_full,
    render_geometric,
)

__all__ = [
    "GeometricGradients",
    "Projection",
    "RenderOutput",
    "RenderSettings",
    "StaleRecordError",
    "TopKRecord",
    "backward_feature",
    "backward_geometric",
    "project_all",
    "render_feature",
    "render_feature_full",
    "render_geometric",
]
