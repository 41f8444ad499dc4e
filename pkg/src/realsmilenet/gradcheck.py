"""Central-difference gradient oracle and the per-op gradient check suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .exceptions import ArgumentError
from .tensor import Tape, Tensor, backward

TOLERANCES = {"double": (1e-5, 1e-7), "single": (1e-3, 1e-5)}


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-6) -> Tensor:
    """Central differences of scalar ``f`` at ``x``, evaluated in float64.

    ``f`` must be deterministic; it receives a float64 tensor and may return a
    Tensor or a float.
    """
    if h <= 0:
        raise ArgumentError(f"step must be positive, got {h}")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def value(arr):
        out = f(Tensor(arr.reshape(base.shape)))
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value(flat)
        flat[i] = orig - h
        down = value(flat)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return Tensor(grad.reshape(base.shape))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float) -> float:
    """Largest |a - n| / max(|n|, atol/rtol); a check passes when this is <= rtol."""
    denom = np.maximum(np.abs(numeric), atol / rtol)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    passed: bool
    trials: int
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<22} max_rel_err={self.max_rel_error:.3e} trials={self.trials}"


def check_function(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    wrt: Sequence[int],
    precision: str = "double",
    h: Optional[float] = None,
) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` maps tensors to a scalar tensor; ``wrt`` lists the argument
    positions whose gradients are compared.
    """
    rtol, atol = TOLERANCES[precision]
    dtype = np.float64 if precision == "double" else np.float32
    h = h if h is not None else (1e-6 if precision == "double" else 1e-4)
    tensors = [Tensor(np.asarray(a, dtype=dtype), requires_grad=i in wrt) for i, a in enumerate(inputs)]
    with Tape():
        loss = fn(*tensors)
        backward(loss)
    worst = 0.0
    for i in wrt:
        def f(t, i=i):
            args = [Tensor(np.asarray(a, dtype=np.float64)) for a in inputs]
            args[i] = t
            return fn(*args)

        numeric = finite_diff_grad(f, Tensor(np.asarray(inputs[i], dtype=np.float64)), h).data
        worst = max(worst, relative_error(tensors[i].grad.astype(np.float64), numeric, rtol, atol))
    return worst


def _projected(out: Tensor, rng_seed: int) -> Tensor:
    """Contract an output with fixed random weights so every element matters."""
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(w.astype(out.dtype))))


def _cases() -> Dict[str, Callable[[np.random.Generator], tuple]]:
    """op name -> builder(rng) returning (fn, inputs, wrt)."""

    def ew(kind):
        def build(rng):
            a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
            return (lambda x, y: _projected(ops.ew_binary(x, y, kind), 1)), [a, b], [0, 1]

        return build

    def bias_add(rng):
        a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3)
        return (lambda x, y: _projected(ops.add(x, y), 2)), [a, b], [0, 1]

    def conv(rng):
        x, k, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        return (lambda x, k, b: _projected(ops.conv2d(x, k, b, stride=1, padding=1), 3)), [x, k, b], [0, 1, 2]

    def conv_strided(rng):
        x, k = rng.standard_normal((1, 2, 7, 7)), rng.standard_normal((3, 2, 2, 2))
        return (lambda x, k: _projected(ops.conv2d(x, k, None, stride=2, padding=1), 4)), [x, k], [0, 1]

    def pool(rng):
        x = rng.standard_normal((1, 2, 6, 6))
        return (lambda x: _projected(ops.avg_pool2d(x, 2, 2), 5)), [x], [0]

    def act(kind):
        def build(rng):
            x = rng.standard_normal((3, 5))
            if kind == "relu":  # keep inputs away from the kink
                x = np.where(np.abs(x) < 0.05, 0.3, x)
            return (lambda t: _projected(ops.activation(t, kind), 6)), [x], [0]

        return build

    def concat(rng):
        a, b = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 5, 4, 4))
        return (lambda x, y: _projected(ops.concat_channels(x, y), 7)), [a, b], [0, 1]

    def bn(mode):
        def build(rng):
            x = rng.standard_normal((4, 3, 4, 4)) * 2 + 0.5
            g, b = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
            rm, rv = rng.standard_normal(3) * 0.1, rng.uniform(0.5, 2.0, 3)

            def fn(x, g, b):
                return _projected(
                    ops.batch_norm2d(x, g, b, Tensor(rm.copy()), Tensor(rv.copy()), mode), 8
                )

            return fn, [x, g, b], [0, 1, 2]

        return build

    def drop(rng):
        x = rng.standard_normal((4, 6))

        def fn(t):
            return _projected(ops.dropout(t, 0.5, "train", np.random.default_rng(11)), 9)

        return fn, [x], [0]

    def aff(rng):
        x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 2)), rng.standard_normal(2)
        return (lambda x, w, b: _projected(ops.affine(x, w, b), 10)), [x, w, b], [0, 1, 2]

    def mm(rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))
        return (lambda x, y: _projected(ops.matmul(x, y), 11)), [a, b], [0, 1]

    def smax(rng):
        x = rng.standard_normal((1, 5)) * 3
        return (lambda t: _projected(ops.softmax(t, axis=1), 12)), [x], [0]

    def logarithm(rng):
        x = rng.uniform(0.2, 2.0, (3, 4))
        return (lambda t: _projected(ops.log(t), 15)), [x], [0]

    def shaping(rng):
        x = rng.standard_normal((2, 6, 3))

        def fn(t):
            parts = ops.split(ops.transpose(t, (1, 0, 2)), [2, 4], axis=0)
            y = ops.reshape(parts[1], (4, 6))
            z = ops.take(ops.slice_axis(y, 1, 4, axis=0), [2, 0, 0], axis=0)
            return ops.add(_projected(z, 13), _projected(parts[0], 14))

        return fn, [x], [0]

    return {
        "ew_binary.add": ew("add"),
        "ew_binary.sub": ew("sub"),
        "ew_binary.hadamard": ew("hadamard"),
        "ew_binary.bias": bias_add,
        "conv2d": conv,
        "conv2d.strided": conv_strided,
        "avg_pool2d": pool,
        "activation.relu": act("relu"),
        "activation.sigmoid": act("sigmoid"),
        "activation.tanh": act("tanh"),
        "concat_channels": concat,
        "batch_norm2d.train": bn("train"),
        "batch_norm2d.eval": bn("eval"),
        "dropout": drop,
        "affine": aff,
        "matmul": mm,
        "softmax": smax,
        "log": logarithm,
        "shape_ops": shaping,
    }


OP_NAMES = tuple(_cases())


def check_op(name: str, precision: str = "double", trials: int = 10, seed: int = 0) -> CheckResult:
    rtol, _ = TOLERANCES[precision]
    builder = _cases()[name]
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        fn, inputs, wrt = builder(rng)
        worst = max(worst, check_function(fn, inputs, wrt, precision))
    return CheckResult(name, worst, worst <= rtol, trials, time.perf_counter() - start)


def micro_config():
    """Smallest full model: 8x8 frames, narrow channels, 1x1 head conv."""
    from .model import ModelConfig

    return ModelConfig(
        in_channels=3,
        resolution=8,
        fpn_channels=(3, 4),
        convlstm_hidden=4,
        head_conv_channels=3,
        head_conv_kernel=1,
        nonlocal_bottleneck=2,
        dropout_p=0.5,
    )


def check_model(precision: str = "double", seed: int = 0, n_frames: int = 2) -> CheckResult:
    """Gradient of the weighted BCE loss w.r.t. every trainable parameter."""
    from .model import forward_batch, init_params
    from .training import LossWeights, batch_loss

    rtol, atol = TOLERANCES[precision]
    dtype = np.float64 if precision == "double" else np.float32
    h = 1e-6 if precision == "double" else 1e-4
    config = micro_config()
    rng = np.random.default_rng(seed)
    params = init_params(config, rng, dtype=np.float64)
    # non-trivial running statistics so eval-mode BN is not the identity
    for name in params.buffers():
        base = 1.0 if name.endswith(".var") else 0.0
        params[name].data = base + 0.2 * rng.random(params[name].shape)
    video = rng.random((n_frames, 3, 8, 8))
    weights = LossWeights(0.7, 0.3)
    start = time.perf_counter()

    def loss_of(p):
        out = forward_batch([video], p, config, "eval")
        return batch_loss(out.score, np.array([1]), weights, config)

    analytic = params.astype(dtype)
    with Tape():
        backward(loss_of(analytic))
    worst = 0.0
    for name in params.trainable():
        def f(t, name=name):
            p = params.astype(np.float64)
            p[name] = t
            return loss_of(p)

        numeric = finite_diff_grad(f, params[name], h).data
        worst = max(worst, relative_error(analytic[name].grad.astype(np.float64), numeric, rtol, atol))
    return CheckResult("model.micro", worst, worst <= rtol, 1, time.perf_counter() - start)


def run_suite(precision: str = "double", trials: int = 10, seed: int = 0, include_model: bool = True) -> List[CheckResult]:
    """Every op once, then the full micro-model; one result per entry."""
    if precision not in TOLERANCES:
        raise ArgumentError(f"precision must be 'double' or 'single', got {precision!r}")
    results = [check_op(name, precision, trials, seed) for name in OP_NAMES]
    if include_model:
        results.append(check_model(precision, seed))
    return results
