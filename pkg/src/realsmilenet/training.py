"""Weighted BCE, Adam, the training loop, evaluation and embedding export."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .data import FoldPlan, Manifest, PathLike, load_video
from .exceptions import ArgumentError, ConfigError, DataError, StateError
from .model import ModelConfig, ModelParams, forward_batch, init_params, positive_probability, predict_labels
from .tensor import Tape, Tensor, backward, no_grad, record, register_backward

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
EVAL_CHUNK = 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_videos: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.005
    decay_mode: str = "weight"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weighting: str = "auto"
    target_fps: float = 5.0
    resolution: int = 48
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_videos < 1:
            raise ConfigError("epochs and batch_videos must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.weighting not in ("auto", "proportion", "unit"):
            raise ConfigError(f"weighting must be auto, proportion or unit, got {self.weighting!r}")
        if self.decay_mode not in ("weight", "lr"):
            raise ConfigError(f"decay_mode must be 'weight' or 'lr', got {self.decay_mode!r}")
        if self.weight_decay < 0 or not self.target_fps > 0 or self.eval_every < 0:
            raise ConfigError("weight_decay and eval_every must be >= 0, target_fps > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # spontaneous (y = 1) term
    beta: float = 1.0  # posed (y = 0) term

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ArgumentError(f"loss weights must be positive, got {self.alpha}, {self.beta}")


def compute_class_weights(manifest_or_labels, weighting: str = "auto") -> LossWeights:
    """Class weights from training-split counts.

    ``auto`` up-weights the minority class: alpha = n_posed / n and
    beta = n_spont / n.  ``proportion`` takes the literal reading (alpha =
    n_spont / n).  ``unit`` gives alpha = beta = 1.
    """
    if weighting == "unit":
        return LossWeights(1.0, 1.0)
    labels = manifest_or_labels.labels if isinstance(manifest_or_labels, Manifest) else np.asarray(manifest_or_labels)
    n_spont = int((labels == 1).sum())
    n_posed = int((labels == 0).sum())
    if n_spont == 0 or n_posed == 0:
        raise DataError(f"class weights need both classes (spontaneous={n_spont}, posed={n_posed})")
    n = n_spont + n_posed
    if weighting == "auto":
        return LossWeights(n_posed / n, n_spont / n)
    if weighting == "proportion":
        return LossWeights(n_spont / n, n_posed / n)
    raise ArgumentError(f"unknown weighting {weighting!r}")


def weighted_bce(p: Tensor, labels, weights: LossWeights) -> Tensor:
    """Mean over the batch of -[alpha*y*log(p) + beta*(1-y)*log(1-p)], p clamped to [eps, 1-eps]."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    pd = p.data.reshape(-1).astype(np.float64)
    if pd.shape != y.shape:
        raise ArgumentError(f"{pd.size} scores but {y.size} labels")
    pc = np.clip(pd, LOG_CLAMP, 1 - LOG_CLAMP)
    terms = weights.alpha * y * np.log(pc) + weights.beta * (1 - y) * np.log(1 - pc)
    loss = np.asarray(-terms.mean(), dtype=p.dtype)
    return record("weighted_bce", (p,), loss, (pd, pc, y, weights, p.shape))


@register_backward("weighted_bce")
def _weighted_bce_backward(saved, g, needs):
    pd, pc, y, w, shape = saved
    inside = (pd >= LOG_CLAMP) & (pd <= 1 - LOG_CLAMP)
    d = (-w.alpha * y / pc + w.beta * (1 - y) / (1 - pc)) * inside / y.size
    return ((d * g).reshape(shape).astype(g.dtype),)


def batch_loss(score: Tensor, labels, weights: LossWeights, config: ModelConfig) -> Tensor:
    """Weighted BCE on the spontaneous-class probability of either head."""
    n = score.shape[0]
    if config.head == "sigmoid":
        p = ops.reshape(score, (n,))
    else:
        p = ops.reshape(ops.split(score, [1, 1], axis=1)[1], (n,))
    return weighted_bce(p, labels, weights)


LossFn = Callable[[Tensor, np.ndarray, ModelConfig], Tensor]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, state: AdamState, config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update from the ``.grad`` buffers, in place.

    A missing gradient counts as zero (e.g. the unused attention conv in the
    No-TSA variant).  With ``decay_mode='weight'`` conv and dense weights
    shrink by ``lr * weight_decay * w`` (decoupled); with ``'lr'`` the step
    size decays as ``lr / (1 + weight_decay * t)`` instead.
    """
    state.t += 1
    t = state.t
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr = config.lr
    if config.decay_mode == "lr":
        lr = lr / (1.0 + config.weight_decay * (t - 1))
    decayed = set(params.decayed()) if config.decay_mode == "weight" and config.weight_decay else set()
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name in params.trainable():
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise StateError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise StateError(f"{name}: optimizer moment shape {m.shape} != parameter shape {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new = p.data - update
        if name in decayed:
            new = new - lr * config.weight_decay * p.data
        p.data = new.astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricRow:
    epoch: int
    split: str
    loss: float
    accuracy: float


@dataclass
class FitResult:
    params: ModelParams
    adam: AdamState
    history: List[MetricRow]
    rng: np.random.Generator
    weights: LossWeights


def _check_configs(model_config: ModelConfig, train_config: TrainConfig) -> None:
    if model_config.resolution != train_config.resolution:
        raise ConfigError(
            f"model resolution {model_config.resolution} differs from training resolution {train_config.resolution}"
        )


def predict_scores(videos: Sequence[np.ndarray], params: ModelParams, config: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode spontaneous probabilities and embeddings, in fixed-size chunks."""
    scores, embs = [], []
    with no_grad():
        for i in range(0, len(videos), EVAL_CHUNK):
            out = forward_batch(videos[i : i + EVAL_CHUNK], params, config, "eval")
            scores.append(out.score.data)
            embs.append(out.embedding.data)
    return np.concatenate(scores), np.concatenate(embs)


def _eval_metrics(videos, labels, params, config, weights) -> Tuple[float, float]:
    raw, _ = predict_scores(videos, params, config)
    with no_grad():
        loss = batch_loss(Tensor(raw), labels, weights, config).item()
    acc = float((predict_labels(raw, config) == labels).mean())
    return loss, acc


def fit_videos(
    videos: Sequence[np.ndarray],
    labels: Sequence[int],
    model_config: ModelConfig,
    train_config: TrainConfig,
    val: Optional[Tuple[Sequence[np.ndarray], Sequence[int]]] = None,
    weights: Optional[LossWeights] = None,
    loss_fn: Optional[LossFn] = None,
    params: Optional[ModelParams] = None,
    progress: Optional[Callable[[MetricRow], None]] = None,
) -> FitResult:
    """Train on in-memory videos (each T x C x R x R float32).

    Per epoch the training videos are shuffled with the run's seeded stream
    and consumed in mini-batches of ``batch_videos``; each mini-batch is one
    forward/backward over the mean batch loss followed by one Adam step.
    """
    _check_configs(model_config, train_config)
    labels = np.asarray(labels, dtype=int)
    if len(videos) == 0:
        raise DataError("empty training split")
    if len(videos) != len(labels):
        raise ArgumentError(f"{len(videos)} videos but {len(labels)} labels")
    weights = weights or compute_class_weights(labels, train_config.weighting)
    if loss_fn is None:
        def loss_fn(score, y, cfg):
            return batch_loss(score, y, weights, cfg)

    rng = np.random.default_rng(train_config.seed)
    params = params if params is not None else init_params(model_config, rng)
    adam = AdamState()
    history: List[MetricRow] = []
    n = len(videos)

    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, train_config.batch_videos):
            idx = order[start : start + train_config.batch_videos]
            batch = [videos[i] for i in idx]
            y = labels[idx]
            params.zero_grad()
            with Tape():
                out = forward_batch(batch, params, model_config, "train", rng)
                loss = loss_fn(out.score, y, model_config)
                backward(loss)
            adam_step(params, adam, train_config)
            total_loss += loss.item() * len(idx)
            correct += int((predict_labels(out.score.data, model_config) == y).sum())
        rows = [MetricRow(epoch, "train", total_loss / n, correct / n)]
        last = epoch == train_config.epochs - 1
        if val is not None and len(val[0]) and (last or (train_config.eval_every and epoch % train_config.eval_every == 0)):
            vloss, vacc = _eval_metrics(val[0], np.asarray(val[1], dtype=int), params, model_config, weights)
            rows.append(MetricRow(epoch, "val", vloss, vacc))
        for row in rows:
            history.append(row)
            logger.debug("epoch %d %s loss=%.4f acc=%.3f", row.epoch, row.split, row.loss, row.accuracy)
            if progress:
                progress(row)
    params.zero_grad()
    return FitResult(params, adam, history, rng, weights)


class VideoCache:
    """Preprocessed clips keyed by (id, fps, resolution, channels)."""

    def __init__(self):
        self._store: Dict[tuple, np.ndarray] = {}

    def get(self, sample, target_fps: float, resolution: int, in_channels: int) -> np.ndarray:
        key = (sample.id, str(sample.frame_dir), target_fps, resolution, in_channels)
        if key not in self._store:
            self._store[key] = load_video(sample, target_fps, resolution, in_channels)
        return self._store[key]

    def load(self, manifest: Manifest, target_fps: float, resolution: int, in_channels: int) -> List[np.ndarray]:
        return [self.get(s, target_fps, resolution, in_channels) for s in manifest]


def train(
    manifest: Manifest,
    folds: FoldPlan,
    fold_index: int,
    model_config: ModelConfig,
    train_config: TrainConfig,
    cache: Optional[VideoCache] = None,
    loss_fn: Optional[LossFn] = None,
    progress: Optional[Callable[[MetricRow], None]] = None,
):
    """Train on every fold except ``fold_index`` and validate on it.

    Class weights come from the training split only.  Returns a
    :class:`~realsmilenet.checkpoint.Checkpoint` whose ``metrics`` hold the
    per-epoch history.
    """
    from .checkpoint import Checkpoint

    _check_configs(model_config, train_config)
    train_split, test_split = folds.split(manifest, fold_index)
    if len(train_split) == 0:
        raise DataError(f"fold {fold_index} leaves no training videos")
    cache = cache or VideoCache()
    fps, res, ch = train_config.target_fps, train_config.resolution, model_config.in_channels
    videos = cache.load(train_split, fps, res, ch)
    val = (cache.load(test_split, fps, res, ch), test_split.labels) if len(test_split) else None
    weights = compute_class_weights(train_split, train_config.weighting)
    fit = fit_videos(videos, train_split.labels, model_config, train_config, val, weights, loss_fn, progress=progress)
    return Checkpoint(
        model_config=model_config,
        params=fit.params,
        train_config=train_config,
        epoch=train_config.epochs,
        rng_state=fit.rng.bit_generator.state,
        metrics=[asdict(r) for r in fit.history],
        adam=fit.adam,
        extra={"fold": fold_index, "k": folds.k, "alpha": fit.weights.alpha, "beta": fit.weights.beta},
    )


# ---------------------------------------------------------------------------
# evaluation and export


@dataclass
class EvalResult:
    accuracy: float
    ids: List[str]
    labels: np.ndarray
    scores: np.ndarray
    predictions: np.ndarray
    embeddings: np.ndarray

    def score_of(self, vid: str) -> float:
        return float(self.scores[self.ids.index(vid)])


def predict_label(score: float) -> int:
    """Threshold rule for a single sigmoid score: 1 iff score >= 0.5."""
    return int(score >= 0.5)


def evaluate(checkpoint, split: Manifest, cache: Optional[VideoCache] = None) -> EvalResult:
    """Eval-mode forward per video; accuracy of the thresholded predictions."""
    if len(split) == 0:
        raise DataError("evaluation split is empty")
    cache = cache or VideoCache()
    cfg = checkpoint.model_config
    videos = cache.load(split, checkpoint.train_config.target_fps, cfg.resolution, cfg.in_channels)
    raw, emb = predict_scores(videos, checkpoint.params, cfg)
    preds = predict_labels(raw, cfg)
    labels = split.labels
    return EvalResult(
        accuracy=float((preds == labels).mean()),
        ids=[s.id for s in split],
        labels=labels,
        scores=positive_probability(raw, cfg),
        predictions=preds,
        embeddings=emb,
    )


def write_metrics(rows: Sequence, path: PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "accuracy"])
        for r in rows:
            r = r if isinstance(r, dict) else asdict(r)
            w.writerow([r["epoch"], r["split"], repr(float(r["loss"])), repr(float(r["accuracy"]))])
    return path


def write_scores(result: EvalResult, path: PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "score", "prediction"])
        for vid, y, s, p in zip(result.ids, result.labels, result.scores, result.predictions):
            w.writerow([vid, int(y), repr(float(s)), int(p)])
    return path


def export_embeddings(checkpoint, manifest: Manifest, path: PathLike, cache: Optional[VideoCache] = None) -> Path:
    """One CSV row per video: id, label, score and the post-ReLU head embedding."""
    result = evaluate(checkpoint, manifest, cache)
    path = Path(path)
    width = result.embeddings.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "score"] + [f"e{i}" for i in range(width)])
        for vid, y, s, e in zip(result.ids, result.labels, result.scores, result.embeddings):
            w.writerow([vid, int(y), repr(float(s))] + [repr(float(v)) for v in e])
    return path
