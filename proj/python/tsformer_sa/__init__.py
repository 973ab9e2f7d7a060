"""Two-view EEG transformer for RSVP target detection."""

from ._core import (
    ConfigError,
    DataError,
    Error,
    Model,
    NumericalError,
    ShapeError,
    bandpass,
    cli,
    cross_entropy,
    cwt,
    default_config,
    default_scales,
    fusion_mask,
    gradcheck,
    lr,
    metrics,
    multiview_loss,
    reduced_config,
    token_fuse,
    token_score,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Error",
    "Model",
    "NumericalError",
    "ShapeError",
    "bandpass",
    "cli",
    "cross_entropy",
    "cwt",
    "default_config",
    "default_scales",
    "fusion_mask",
    "gradcheck",
    "lr",
    "metrics",
    "multiview_loss",
    "reduced_config",
    "token_fuse",
    "token_score",
]
