"""RealSmileNet: TSA -> FPN -> ConvLSTM -> NonLocal classification head.

All blocks are plain functions over a :class:`ModelParams` name map so the
same forward code serves training, evaluation and gradient checking.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .exceptions import ConfigError, InputError, ShapeError
from .tensor import Tensor

GATES = ("i", "f", "o", "g")
OUTPUT_GAIN = 1.0 / 3.0


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    resolution: int = 48
    fpn_channels: Tuple[int, int] = (16, 32)
    convlstm_hidden: int = 32
    convlstm_kernel: int = 3
    head_conv_channels: int = 64
    head_conv_kernel: int = 2
    nonlocal_bottleneck: Optional[int] = None
    use_tsa: bool = True
    head: str = "sigmoid"
    dropout_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "fpn_channels", tuple(int(c) for c in self.fpn_channels))
        if self.nonlocal_bottleneck is None:
            object.__setattr__(self, "nonlocal_bottleneck", max(self.convlstm_hidden // 2, 1))
        self.validate()

    @property
    def tsa_channels(self) -> int:
        return self.in_channels

    @property
    def lstm_size(self) -> int:
        """Spatial extent of FPN output and ConvLSTM state."""
        return self.resolution // 4

    @property
    def head_size(self) -> int:
        """Spatial extent after the head convolution."""
        return self.lstm_size // 2 - self.head_conv_kernel + 1

    @property
    def embedding_dim(self) -> int:
        return self.head_conv_channels * self.head_size**2

    @property
    def n_outputs(self) -> int:
        return 1 if self.head == "sigmoid" else 2

    def validate(self) -> None:
        counts = (self.in_channels, *self.fpn_channels, self.convlstm_hidden, self.head_conv_channels)
        if len(self.fpn_channels) != 2 or any(c < 1 for c in counts):
            raise ConfigError("all channel counts must be >= 1 and fpn_channels must be a pair")
        if self.nonlocal_bottleneck < 1:
            raise ConfigError(f"nonlocal_bottleneck must be >= 1, got {self.nonlocal_bottleneck}")
        if self.convlstm_kernel < 1 or self.convlstm_kernel % 2 == 0:
            raise ConfigError("convlstm_kernel must be a positive odd integer (same padding)")
        if self.resolution < 4 or self.resolution % 4:
            raise ConfigError(f"resolution {self.resolution} must be divisible by 4 (two 2x2 pools)")
        if self.lstm_size % 2:
            raise ConfigError(f"pooled extent {self.lstm_size} must be divisible by 2 for the head pool")
        if self.head_conv_kernel < 1 or self.head_size < 1:
            raise ConfigError(
                f"head conv {self.head_conv_kernel}x{self.head_conv_kernel} does not fit the "
                f"{self.lstm_size // 2}x{self.lstm_size // 2} pooled map; raise resolution"
            )
        if self.head not in ("sigmoid", "softmax"):
            raise ConfigError(f"head must be 'sigmoid' or 'softmax', got {self.head!r}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fpn_channels"] = list(self.fpn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams(dict):
    """Name -> Tensor map holding weights and batch-norm running buffers."""

    BUFFER_SUFFIXES = (".mean", ".var")

    def trainable(self) -> List[str]:
        return [k for k in self if not k.endswith(self.BUFFER_SUFFIXES)]

    def buffers(self) -> List[str]:
        return [k for k in self if k.endswith(self.BUFFER_SUFFIXES)]

    def decayed(self) -> List[str]:
        """Conv and dense weights: the tensors subject to weight decay."""
        return [k for k in self if k.endswith(".W")]

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, t in self.items():
            out[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
        return out

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams()
        for k, t in self.items():
            out[k] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k)
        return out

    def count(self) -> int:
        return int(sum(self[k].data.size for k in self.trainable()))


class ConvLSTMState(NamedTuple):
    h: Tensor
    c: Tensor


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name with its shape, in canonical order."""
    c_in = config.in_channels
    f1, f2 = config.fpn_channels
    hid, k = config.convlstm_hidden, config.convlstm_kernel
    bott, hc = config.nonlocal_bottleneck, config.head_conv_channels
    shapes: Dict[str, Tuple[int, ...]] = {
        "tsa.conv.W": (c_in, c_in, 3, 3),
        "tsa.conv.b": (c_in,),
    }
    for name, (ci, co) in (("block1", (c_in, f1)), ("block2", (f1, f2))):
        shapes[f"fpn.{name}.conv.W"] = (co, ci, 3, 3)
        shapes[f"fpn.{name}.conv.b"] = (co,)
        for s in ("gamma", "beta", "mean", "var"):
            shapes[f"fpn.{name}.bn.{s}"] = (co,)
    for gate in GATES:
        shapes[f"lstm.{gate}.W"] = (hid, f2 + hid, k, k)
        shapes[f"lstm.{gate}.b"] = (hid,)
    for emb in ("theta", "phi", "g"):
        shapes[f"nl.{emb}.W"] = (bott, hid, 1, 1)
        shapes[f"nl.{emb}.b"] = (bott,)
    shapes["nl.z.W"] = (hid, bott, 1, 1)
    shapes["nl.z.b"] = (hid,)
    kh = config.head_conv_kernel
    shapes["head.conv.W"] = (hc, hid, kh, kh)
    shapes["head.conv.b"] = (hc,)
    for s in ("gamma", "beta", "mean", "var"):
        shapes[f"head.bn.{s}"] = (hc,)
    shapes["head.fc.W"] = (config.embedding_dim, config.n_outputs)
    shapes["head.fc.b"] = (config.n_outputs,)
    return shapes


def fan_in(shape: Tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Draw a fresh parameter set.

    Conv weights are uniform with variance 2/fan_in (Kaiming, ReLU gain).  The
    final dense layer feeds a sigmoid/softmax and is drawn from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) (variance 1/(3 fan_in)) so the initial
    logits stay small and the first-epoch loss sits near chance.  Biases and
    BN shifts are zero, BN scales and running variances one.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_params needs a ModelConfig")
    config.validate()
    params = ModelParams()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "W":
            gain = OUTPUT_GAIN if name == "head.fc.W" else 2.0
            bound = np.sqrt(3.0 * gain / fan_in(shape))
            arr = rng.uniform(-bound, bound, size=shape)
        elif leaf in ("gamma", "var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        trainable = leaf not in ("mean", "var")
        params[name] = Tensor(arr.astype(dtype), requires_grad=trainable, name=name)
    return params


def check_params(params: ModelParams, config: ModelConfig) -> None:
    expected = param_shapes(config)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ConfigError(f"parameter names disagree with config (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"{name}: shape {params[name].shape} but config implies {shape}")


# ---------------------------------------------------------------------------
# blocks


def tsa_forward(prev: Tensor, cur: Tensor, params: ModelParams) -> Tensor:
    """Residual difference attention: conv(cur - prev) * cur + cur."""
    if prev.shape != cur.shape:
        raise ShapeError(f"TSA frames differ in shape: {prev.shape} vs {cur.shape}")
    diff = ops.sub(cur, prev)
    att = ops.conv2d(diff, params["tsa.conv.W"], params["tsa.conv.b"], padding=1)
    return ops.add(ops.mul(att, cur), cur)


def fpn_forward(x: Tensor, params: ModelParams, mode: str = "train") -> Tensor:
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ConfigError(f"FPN input {x.shape[-2]}x{x.shape[-1]} is not divisible by 4")
    for block in ("block1", "block2"):
        p = f"fpn.{block}"
        x = ops.conv2d(x, params[f"{p}.conv.W"], params[f"{p}.conv.b"], padding=1)
        x = ops.batch_norm2d(
            x, params[f"{p}.bn.gamma"], params[f"{p}.bn.beta"], params[f"{p}.bn.mean"], params[f"{p}.bn.var"], mode
        )
        x = ops.avg_pool2d(ops.relu(x), 2)
    return x


def fused_gate_params(params: ModelParams) -> Tuple[Tensor, Tensor]:
    """Stack the four gate kernels so one convolution computes every gate."""
    w = ops.concat([params[f"lstm.{g}.W"] for g in GATES], axis=0)
    b = ops.concat([params[f"lstm.{g}.b"] for g in GATES], axis=0)
    return w, b


def zero_state(n: int, hidden: int, size: int, dtype=np.float32) -> ConvLSTMState:
    z = np.zeros((n, hidden, size, size), dtype=dtype)
    return ConvLSTMState(Tensor(z), Tensor(z.copy()))


def convlstm_gates(
    e_t: Tensor, h_prev: Tensor, params: ModelParams, fused: Optional[Tuple[Tensor, Tensor]] = None
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    if e_t.shape[2:] != h_prev.shape[2:] or e_t.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"ConvLSTM input {e_t.shape} does not match state {h_prev.shape}")
    w, b = fused if fused is not None else fused_gate_params(params)
    u = ops.concat_channels(e_t, h_prev)
    z = ops.conv2d(u, w, b, padding=w.shape[-1] // 2)
    hid = h_prev.shape[1]
    zi, zf, zo, zg = ops.split(z, [hid] * 4, axis=1)
    return ops.sigmoid(zi), ops.sigmoid(zf), ops.sigmoid(zo), ops.tanh(zg)


def convlstm_step(
    e_t: Tensor, state: ConvLSTMState, params: ModelParams, fused: Optional[Tuple[Tensor, Tensor]] = None
) -> ConvLSTMState:
    i, f, o, g = convlstm_gates(e_t, state.h, params, fused)
    c = ops.add(ops.mul(f, state.c), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return ConvLSTMState(h, c)


def nonlocal_forward(x: Tensor, params: ModelParams) -> Tensor:
    """Dot-product non-local block with residual connection."""
    n, c, s1, s2 = x.shape
    bott = params["nl.theta.W"].shape[0]
    if bott < 1:
        raise ConfigError("non-local bottleneck must be >= 1")
    p = s1 * s2

    def embed(name):
        return ops.reshape(ops.conv2d(x, params[f"nl.{name}.W"], params[f"nl.{name}.b"]), (n, bott, p))

    theta, phi, g = embed("theta"), embed("phi"), embed("g")
    pairwise = ops.scale(ops.matmul(ops.transpose(theta, (0, 2, 1)), phi), 1.0 / p)
    y = ops.matmul(pairwise, ops.transpose(g, (0, 2, 1)))
    y = ops.reshape(ops.transpose(y, (0, 2, 1)), (n, bott, s1, s2))
    z = ops.conv2d(y, params["nl.z.W"], params["nl.z.b"])
    return ops.add(z, x)


class HeadOutput(NamedTuple):
    score: Tensor
    embedding: Tensor


def classify(
    h_n: Tensor, params: ModelParams, config: ModelConfig, mode: str = "eval", rng: Optional[np.random.Generator] = None
) -> HeadOutput:
    """Classification block on the final hidden state.

    Returns per-video scores (N x 1 probability for the sigmoid head, N x 2
    for softmax) and the flattened post-ReLU embedding.
    """
    x = nonlocal_forward(h_n, params)
    if x.shape[-1] < 2:
        raise ConfigError("hidden state too small for the 2x2 head pool")
    x = ops.avg_pool2d(x, 2)
    if x.shape[-1] < params["head.conv.W"].shape[-1]:
        raise ConfigError(f"pooled extent {x.shape[-1]} smaller than the head conv kernel")
    x = ops.conv2d(x, params["head.conv.W"], params["head.conv.b"])
    x = ops.batch_norm2d(
        x, params["head.bn.gamma"], params["head.bn.beta"], params["head.bn.mean"], params["head.bn.var"], mode
    )
    x = ops.relu(x)
    embedding = ops.reshape(x, (x.shape[0], -1))
    x = ops.dropout(embedding, config.dropout_p, mode, rng)
    logits = ops.affine(x, params["head.fc.W"], params["head.fc.b"])
    score = ops.sigmoid(logits) if config.head == "sigmoid" else ops.softmax(logits, axis=1)
    return HeadOutput(score, embedding)


# ---------------------------------------------------------------------------
# whole model


def as_video(frames, config: ModelConfig, dtype=np.float32) -> np.ndarray:
    """Stack a frame sequence into a T x C x R x R array, validating extents."""
    if isinstance(frames, np.ndarray):
        arr = frames
    else:
        arr = np.stack([f.data if isinstance(f, Tensor) else np.asarray(f) for f in frames])
    arr = np.asarray(arr, dtype=dtype)
    expected = (config.in_channels, config.resolution, config.resolution)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeError(f"video must be T x {expected[0]} x {expected[1]} x {expected[2]}, got {arr.shape}")
    need = 2 if config.use_tsa else 1
    if arr.shape[0] < need:
        raise InputError(f"video has {arr.shape[0]} frame(s); at least {need} required")
    return arr


def forward_batch(
    videos: Sequence,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> HeadOutput:
    """Forward a list of videos of arbitrary, possibly different lengths.

    Each video runs its own ConvLSTM recurrence of exact length from a zero
    state.  For speed the recurrences advance in lockstep: videos are sorted
    by length, frames are laid out time-major, and step ``t`` only feeds the
    videos that still have a frame at ``t``.  Nothing is padded or masked, so
    the result equals scoring every video on its own (up to batch-norm batch
    statistics in train mode).
    """
    dtype = params["tsa.conv.W"].dtype
    arrays = [as_video(v, config, dtype) for v in videos]
    if not arrays:
        raise InputError("forward_batch needs at least one video")
    offset = 1 if config.use_tsa else 0
    lengths = np.array([a.shape[0] - offset for a in arrays])
    order = np.argsort(-lengths, kind="stable")
    active = [int((lengths > t).sum()) for t in range(int(lengths.max()))]

    # time-major frame layout: step t holds videos order[:active[t]]
    cur = np.concatenate([np.stack([arrays[v][t + offset] for v in order[:k]]) for t, k in enumerate(active)])
    if config.use_tsa:
        prev = np.concatenate([np.stack([arrays[v][t] for v in order[:k]]) for t, k in enumerate(active)])
        x = tsa_forward(Tensor(prev), Tensor(cur), params)
    else:
        x = Tensor(cur)
    feats = fpn_forward(x, params, mode)
    steps = ops.split(feats, active, axis=0) if len(active) > 1 else (feats,)

    fused = fused_gate_params(params)
    state = zero_state(active[0], config.convlstm_hidden, config.lstm_size, dtype)
    finished: List[Tensor] = []
    for t, e_t in enumerate(steps):
        k = active[t]
        if state.h.shape[0] > k:
            h_keep, h_done = ops.split(state.h, [k, state.h.shape[0] - k], axis=0)
            (c_keep, _) = ops.split(state.c, [k, state.c.shape[0] - k], axis=0)
            finished.append(h_done)
            state = ConvLSTMState(h_keep, c_keep)
        state = convlstm_step(e_t, state, params, fused)
    finished.append(state.h)
    # finished blocks run from shortest to longest videos; restore input order
    h_sorted = ops.concat(finished[::-1], axis=0) if len(finished) > 1 else finished[0]
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    h_n = h_sorted if np.array_equal(order, np.arange(len(order))) else ops.take(h_sorted, inverse, axis=0)
    return classify(h_n, params, config, mode, rng)


def model_forward(
    frames, params: ModelParams, config: ModelConfig, mode: str = "eval", rng: Optional[np.random.Generator] = None
) -> HeadOutput:
    """Score one video; returns (score, embedding) with a leading batch axis of 1."""
    return forward_batch([frames], params, config, mode, rng)


def positive_probability(score: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Probability of the spontaneous class from raw head output."""
    score = np.asarray(score)
    return score[:, 0] if config.head == "sigmoid" else score[:, 1]


def predict_labels(score: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Label 1 iff the sigmoid score is >= 0.5; argmax for the softmax head."""
    score = np.asarray(score)
    if config.head == "sigmoid":
        return (score[:, 0] >= 0.5).astype(int)
    return np.argmax(score, axis=1).astype(int)
