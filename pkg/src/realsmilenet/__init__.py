"""Spontaneous vs posed smile classification from raw video frames.

A numpy reverse-mode autodiff core drives a temporal-attention, ConvLSTM and
non-local network; see the README for the command line and the estimator.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import FoldPlan, Manifest, VideoSample, load_manifest, make_folds, preprocess_frame, sample_frames
from .estimator import RealSmileClassifier
from .exceptions import (
    ArgumentError,
    ConfigError,
    DataError,
    FormatError,
    InputError,
    NumericalError,
    RealSmileError,
    ShapeError,
    StateError,
)
from .model import ModelConfig, ModelParams, forward_batch, init_params, model_forward
from .synth import SynthConfig, synth_generate
from .tensor import Tape, Tensor, backward, no_grad
from .training import LossWeights, TrainConfig, compute_class_weights, evaluate, export_embeddings, train, weighted_bce

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "Checkpoint", "ConfigError", "DataError", "FoldPlan", "FormatError", "InputError",
    "LossWeights", "Manifest", "ModelConfig", "ModelParams", "NumericalError", "RealSmileClassifier",
    "RealSmileError", "ShapeError", "StateError", "SynthConfig", "Tape", "Tensor", "TrainConfig", "VideoSample",
    "backward", "compute_class_weights", "evaluate", "export_embeddings", "forward_batch", "init_params",
    "load_checkpoint", "load_manifest", "make_folds", "model_forward", "no_grad", "preprocess_frame",
    "sample_frames", "save_checkpoint", "synth_generate", "train", "weighted_bce",
]
