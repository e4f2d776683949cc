"""Prediction-adaptation-correction RNN acoustic models, their baselines and
multilingual transfer, in numpy with optional numba kernels."""

from .errors import (ConfigError, DataError, DimensionError, FormatError, LabelError,
                     PacRnnError, ParameterError, SpecError, StateError)
from .kernels import BACKEND
from .model import (TOY_SIZES, VARIANTS, FrameOutput, Model, PacRnnConfig, RecurrentState,
                    build_model, forward_step, forward_utterance, frame_error_rate, joint_loss)
from .tensor import Rng

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "DataError", "DimensionError", "FormatError", "FrameOutput",
    "LabelError", "Model", "PacRnnConfig", "PacRnnError", "ParameterError", "RecurrentState",
    "Rng", "SpecError", "StateError", "TOY_SIZES", "VARIANTS", "build_model", "forward_step",
    "forward_utterance", "frame_error_rate", "joint_loss",
]
