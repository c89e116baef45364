"""Efficient video quality assessment with a state-space sequence encoder.

The package covers the full pipeline: raw video ingestion and synthesis
(:mod:`mvqa.video_io`), spatial/temporal sampling including mask-fusion
sampling (:mod:`mvqa.sampling`), the state-space engine and bidirectional
block (:mod:`mvqa.ssm_core`), the quality model (:mod:`mvqa.model`), losses
and the training loop (:mod:`mvqa.training`), rank/linear correlation metrics
(:mod:`mvqa.metrics`), and a CLI (:mod:`mvqa.cli`).
"""

from . import autodiff, metrics, model, sampling, ssm_core, training, video_io
from .errors import (
    ConfigError,
    DegenerateError,
    DimError,
    FormatError,
    IoError,
    MvqaError,
    NumericError,
    ParamError,
    TruncationError,
)

__version__ = "0.1.0"
