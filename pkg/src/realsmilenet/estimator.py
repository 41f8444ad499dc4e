"""scikit-learn style wrapper around the training loop.

``X`` is a sequence of videos, each a float array ``T x C x R x R`` in
[0, 1] (``T`` may differ between videos); ``y`` holds 0 (posed) or 1
(spontaneous).
"""

from __future__ import annotations

from dataclasses import fields
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .exceptions import ArgumentError, InputError, ShapeError
from .model import ModelConfig, positive_probability, predict_labels
from .training import TrainConfig, fit_videos, predict_scores

_MODEL_FIELDS = tuple(f.name for f in fields(ModelConfig))
_TRAIN_FIELDS = ("epochs", "batch_videos", "lr", "weight_decay", "decay_mode", "weighting", "seed")


def check_video(video, in_channels: Optional[int] = None, resolution: Optional[int] = None, min_frames: int = 2) -> np.ndarray:
    """Validate one clip and return it as a float32 ``T x C x R x R`` array."""
    arr = np.asarray(video)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise InputError(f"video must be numeric, got dtype {arr.dtype}")
    if arr.ndim != 4:
        raise ShapeError(f"video must be 4-D (T x C x R x R), got shape {arr.shape}")
    if arr.shape[2] != arr.shape[3]:
        raise ShapeError(f"frames must be square, got {arr.shape[2]}x{arr.shape[3]}")
    if in_channels is not None and arr.shape[1] != in_channels:
        raise ShapeError(f"expected {in_channels} channels, got {arr.shape[1]}")
    if resolution is not None and arr.shape[2] != resolution:
        raise ShapeError(f"expected {resolution}x{resolution} frames, got {arr.shape[2]}x{arr.shape[3]}")
    if arr.shape[0] < min_frames:
        raise InputError(f"video has {arr.shape[0]} frame(s); at least {min_frames} required")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise InputError("video contains NaN or Inf")
    return arr


def check_videos(X, **kwargs) -> List[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 4:
        raise ShapeError("X must be a sequence of videos; wrap a single video in a list")
    videos = [check_video(v, **kwargs) for v in X]
    if not videos:
        raise InputError("X holds no videos")
    return videos


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"y must be a 1-D array of {n} labels, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ArgumentError("labels must be 0 (posed) or 1 (spontaneous)")
    return y.astype(int)


class RealSmileClassifier(ClassifierMixin, BaseEstimator):
    """Spontaneous-vs-posed smile classifier over variable-length clips."""

    def __init__(
        self,
        in_channels: int = 3,
        resolution: int = 48,
        fpn_channels=(16, 32),
        convlstm_hidden: int = 32,
        convlstm_kernel: int = 3,
        head_conv_channels: int = 64,
        head_conv_kernel: int = 2,
        nonlocal_bottleneck: Optional[int] = None,
        use_tsa: bool = True,
        head: str = "sigmoid",
        dropout_p: float = 0.5,
        epochs: int = 60,
        batch_videos: int = 16,
        lr: float = 1e-3,
        weight_decay: float = 0.005,
        decay_mode: str = "weight",
        weighting: str = "auto",
        seed: int = 0,
    ):
        self.in_channels = in_channels
        self.resolution = resolution
        self.fpn_channels = fpn_channels
        self.convlstm_hidden = convlstm_hidden
        self.convlstm_kernel = convlstm_kernel
        self.head_conv_channels = head_conv_channels
        self.head_conv_kernel = head_conv_kernel
        self.nonlocal_bottleneck = nonlocal_bottleneck
        self.use_tsa = use_tsa
        self.head = head
        self.dropout_p = dropout_p
        self.epochs = epochs
        self.batch_videos = batch_videos
        self.lr = lr
        self.weight_decay = weight_decay
        self.decay_mode = decay_mode
        self.weighting = weighting
        self.seed = seed

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_FIELDS})

    def train_config(self) -> TrainConfig:
        kw = {k: getattr(self, k) for k in _TRAIN_FIELDS}
        return TrainConfig(resolution=self.resolution, **kw)

    def _videos(self, X) -> List[np.ndarray]:
        return check_videos(X, in_channels=self.in_channels, resolution=self.resolution, min_frames=2 if self.use_tsa else 1)

    def fit(self, X: Sequence, y, eval_set=None):
        mc, tc = self.model_config(), self.train_config()
        videos = self._videos(X)
        labels = check_labels(y, len(videos))
        val = None
        if eval_set is not None:
            vx = self._videos(eval_set[0])
            val = (vx, check_labels(eval_set[1], len(vx)))
        fit = fit_videos(videos, labels, mc, tc, val=val)
        self.params_ = fit.params
        self.adam_ = fit.adam
        self.history_ = fit.history
        self.loss_weights_ = fit.weights
        self.classes_ = np.array([0, 1])
        self.model_config_ = mc
        self.train_config_ = tc
        return self

    def _raw(self, X):
        check_is_fitted(self, "params_")
        raw, emb = predict_scores(self._videos(X), self.params_, self.model_config_)
        return raw, emb

    def predict_proba(self, X) -> np.ndarray:
        raw, _ = self._raw(X)
        p1 = positive_probability(raw, self.model_config_).astype(np.float64)
        return np.stack([1 - p1, p1], axis=1)

    def predict(self, X) -> np.ndarray:
        raw, _ = self._raw(X)
        return predict_labels(raw, self.model_config_)

    def transform(self, X) -> np.ndarray:
        """Post-ReLU head embedding for every video."""
        return self._raw(X)[1]

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "params_")
        return Checkpoint(
            model_config=self.model_config_,
            params=self.params_,
            train_config=self.train_config_,
            epoch=self.train_config_.epochs,
            metrics=[dict(vars(r)) for r in self.history_],
            adam=self.adam_,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RealSmileClassifier":
        mc, tc = ckpt.model_config, ckpt.train_config
        est = cls(**{k: getattr(mc, k) for k in _MODEL_FIELDS}, **{k: getattr(tc, k) for k in _TRAIN_FIELDS})
        est.params_ = ckpt.params
        est.adam_ = ckpt.adam
        est.history_ = []
        est.loss_weights_ = None
        est.classes_ = np.array([0, 1])
        est.model_config_ = mc
        est.train_config_ = tc
        return est
