import numpy as np
import pytest

from realsmilenet import ops
from realsmilenet.exceptions import ConfigError, InputError, ShapeError
from realsmilenet.model import (
    ConvLSTMState,
    ModelConfig,
    classify,
    convlstm_gates,
    convlstm_step,
    forward_batch,
    fpn_forward,
    init_params,
    model_forward,
    nonlocal_forward,
    param_shapes,
    predict_labels,
    tsa_forward,
)
from realsmilenet.tensor import Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# -- config and parameters ----------------------------------------------------


def test_default_config_shapes():
    cfg = ModelConfig()
    assert cfg.nonlocal_bottleneck == 16
    assert cfg.lstm_size == 12 and cfg.head_size == 5
    assert cfg.embedding_dim == 25 * 64
    shapes = param_shapes(cfg)
    assert shapes["lstm.i.W"] == (32, 32 + 32, 3, 3)
    assert shapes["head.fc.W"] == (1600, 1)
    assert len(shapes) == len(set(shapes))


@pytest.mark.parametrize(
    "kwargs",
    [{"resolution": 50}, {"resolution": 52}, {"nonlocal_bottleneck": 0}, {"head": "linear"}, {"dropout_p": 1.0},
     {"convlstm_kernel": 2}, {"fpn_channels": (0, 4)}, {"resolution": 8}],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_config_round_trip():
    cfg = ModelConfig(resolution=64, use_tsa=False, head="softmax")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_init_is_deterministic_with_zero_biases():
    cfg = ModelConfig()
    a = init_params(cfg, np.random.default_rng(9))
    b = init_params(cfg, np.random.default_rng(9))
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()
        if name.endswith((".b", ".beta", ".mean")):
            assert not a[name].data.any()
        if name.endswith((".gamma", ".var")):
            assert np.all(a[name].data == 1)
    assert sorted(a.buffers()) == sorted(k for k in a if k.endswith((".mean", ".var")))


def test_init_variance_matches_fan_in():
    cfg = ModelConfig()
    p = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    w = p["lstm.i.W"].data  # 32*64*9 = 18432 draws
    assert w.size >= 10_000
    fan = 64 * 9
    assert abs(w.var() / (2.0 / fan) - 1) < 0.2


# -- TSA -----------------------------------------------------------------------


def test_tsa_identity_and_zero_frame(rng):
    p = init_params(ModelConfig(resolution=16), rng, dtype=np.float64)
    x = T(rng.random((2, 3, 16, 16)))
    assert tsa_forward(x, x, p).data.tobytes() == x.data.tobytes()
    zero = T(np.zeros((2, 3, 16, 16)))
    assert not tsa_forward(x, zero, p).data.any()


def test_tsa_compositional_oracle(rng):
    from scipy.signal import correlate

    p = init_params(ModelConfig(resolution=16), rng, dtype=np.float64)
    p["tsa.conv.b"].data = rng.standard_normal(3)
    prev, cur = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    out = tsa_forward(T(prev), T(cur), p).data
    d = np.pad(cur - prev, ((0, 0), (0, 0), (1, 1), (1, 1)))[0]
    w, b = p["tsa.conv.W"].data, p["tsa.conv.b"].data
    att = np.stack([correlate(d, w[o], mode="valid")[0] + b[o] for o in range(3)])
    np.testing.assert_allclose(out[0], att * cur[0] + cur[0], atol=1e-6)


def test_tsa_shape_mismatch(rng):
    p = init_params(ModelConfig(resolution=16), rng)
    with pytest.raises(ShapeError):
        tsa_forward(T(np.zeros((1, 3, 16, 16))), T(np.zeros((1, 3, 8, 8))), p)


# -- FPN -----------------------------------------------------------------------


@pytest.mark.parametrize("res,size", [(48, 12), (64, 16)])
def test_fpn_output_shape_and_sign(res, size, rng):
    cfg = ModelConfig(resolution=res)
    p = init_params(cfg, rng)
    out = fpn_forward(Tensor(rng.random((2, 3, res, res)).astype(np.float32)), p, "train")
    assert out.shape == (2, 32, size, size)
    assert np.all(out.data >= 0)


def test_fpn_rejects_indivisible_input(rng):
    p = init_params(ModelConfig(resolution=16), rng)
    with pytest.raises(ConfigError):
        fpn_forward(T(np.zeros((1, 3, 18, 18))), p)


# -- ConvLSTM --------------------------------------------------------------------


def _zeroed_lstm(cfg, rng):
    p = init_params(cfg, rng, dtype=np.float64)
    for g in "ifog":
        p[f"lstm.{g}.W"].data = np.zeros_like(p[f"lstm.{g}.W"].data)
        p[f"lstm.{g}.b"].data = np.zeros_like(p[f"lstm.{g}.b"].data)
    return p


def test_convlstm_zero_weight_trace(rng):
    cfg = ModelConfig(resolution=16)
    p = _zeroed_lstm(cfg, rng)
    e = T(rng.standard_normal((1, 32, 4, 4)))
    h0 = T(np.zeros((1, 32, 4, 4)))
    i, f, o, g = convlstm_gates(e, h0, p)
    for gate, value in ((i, 0.5), (f, 0.5), (o, 0.5), (g, 0.0)):
        assert np.all(gate.data == value)
    state = ConvLSTMState(h0, T(np.zeros((1, 32, 4, 4))))
    for _ in range(5):
        state = convlstm_step(e, state, p)
        assert not state.h.data.any() and not state.c.data.any()


def test_convlstm_analytic_cell(rng):
    cfg = ModelConfig(resolution=16)
    p = _zeroed_lstm(cfg, rng)
    c0 = rng.standard_normal((1, 32, 4, 4)) * 3
    state = convlstm_step(T(rng.standard_normal((1, 32, 4, 4))), ConvLSTMState(T(np.zeros_like(c0)), T(c0)), p)
    np.testing.assert_allclose(state.c.data, 0.5 * c0, atol=1e-6)
    np.testing.assert_allclose(state.h.data, 0.5 * np.tanh(0.5 * c0), atol=1e-6)


def test_convlstm_gate_ranges(rng):
    cfg = ModelConfig(resolution=16)
    p = init_params(cfg, rng, dtype=np.float64)
    i, f, o, g = convlstm_gates(T(rng.standard_normal((2, 32, 4, 4)) * 5), T(rng.standard_normal((2, 32, 4, 4))), p)
    for gate in (i, f, o):
        assert np.all((gate.data > 0) & (gate.data < 1))
    assert np.all(np.abs(g.data) < 1)


def test_convlstm_shape_mismatch(rng):
    p = init_params(ModelConfig(resolution=16), rng)
    with pytest.raises(ShapeError):
        convlstm_gates(T(np.zeros((1, 32, 4, 4))), T(np.zeros((1, 32, 2, 2))), p)


# -- NonLocal ----------------------------------------------------------------------


def brute_force_nonlocal(x, p):
    """Double loop over position pairs."""
    n, c, s, _ = x.shape
    P = s * s

    def emb(name):
        w, b = p[f"nl.{name}.W"].data[:, :, 0, 0], p[f"nl.{name}.b"].data
        return np.einsum("oc,ncp->nop", w, x.reshape(n, c, P)) + b[None, :, None]

    theta, phi, g = emb("theta"), emb("phi"), emb("g")
    bott = theta.shape[1]
    y = np.zeros((n, bott, P))
    for b_ in range(n):
        for i in range(P):
            for j in range(P):
                f_ij = sum(theta[b_, k, i] * phi[b_, k, j] for k in range(bott)) / P
                y[b_, :, i] += f_ij * g[b_, :, j]
    wz, bz = p["nl.z.W"].data[:, :, 0, 0], p["nl.z.b"].data
    z = np.einsum("oc,ncp->nop", wz, y) + bz[None, :, None]
    return z.reshape(x.shape) + x


@pytest.mark.parametrize("s", [2, 3, 4])
def test_nonlocal_matches_brute_force(s, rng):
    cfg = ModelConfig(resolution=16, convlstm_hidden=6)
    p = init_params(cfg, rng, dtype=np.float64)
    for k in ("nl.theta.b", "nl.phi.b", "nl.g.b", "nl.z.b"):
        p[k].data = rng.standard_normal(p[k].shape)
    x = rng.standard_normal((2, 6, s, s))
    np.testing.assert_allclose(nonlocal_forward(T(x), p).data, brute_force_nonlocal(x, p), atol=1e-6)


@pytest.mark.parametrize("s", [12, 16])
def test_nonlocal_zero_branch_and_shape(s, rng):
    p = init_params(ModelConfig(), rng, dtype=np.float64)
    x = T(rng.standard_normal((1, 32, s, s)))
    assert nonlocal_forward(x, p).shape == x.shape
    p["nl.z.W"].data = np.zeros_like(p["nl.z.W"].data)
    assert nonlocal_forward(x, p).data.tobytes() == x.data.tobytes()


# -- head and full model -----------------------------------------------------------


def test_classify_shapes_and_ranges(rng):
    cfg = ModelConfig()
    p = init_params(cfg, rng)
    h = Tensor(rng.standard_normal((3, 32, 12, 12)).astype(np.float32))
    out = classify(h, p, cfg, "train", rng)
    assert out.score.shape == (3, 1) and out.embedding.shape == (3, 25 * 64)
    assert np.all((out.score.data > 0) & (out.score.data < 1))
    assert np.all(out.embedding.data >= 0)

    soft = ModelConfig(head="softmax")
    ps = init_params(soft, rng)
    s = classify(h, ps, soft, "eval").score.data
    assert s.shape == (3, 2)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("n", [2, 9, 71])
def test_any_length_gives_finite_score(n, small_config, rng):
    p = init_params(small_config, rng)
    score = model_forward(rng.random((n, 3, 16, 16)), p, small_config, "eval").score.data
    assert score.shape == (1, 1) and np.isfinite(score).all() and 0 < score[0, 0] < 1


def test_too_few_frames(small_config, rng):
    p = init_params(small_config, rng)
    with pytest.raises(InputError):
        model_forward(rng.random((1, 3, 16, 16)), p, small_config)
    with pytest.raises(ShapeError):
        model_forward(rng.random((3, 3, 8, 8)), p, small_config)
    notsa = ModelConfig(resolution=16, fpn_channels=(4, 8), convlstm_hidden=8, head_conv_channels=8, use_tsa=False)
    assert model_forward(rng.random((1, 3, 16, 16)), init_params(notsa, rng), notsa).score.shape == (1, 1)


def test_lockstep_batch_equals_per_video(micro, micro_params, rng):
    videos = [rng.random((n, 3, 8, 8)) for n in (4, 2, 7, 4, 3)]
    batch = forward_batch(videos, micro_params, micro, "eval")
    for i, v in enumerate(videos):
        single = model_forward(v, micro_params, micro, "eval")
        np.testing.assert_allclose(batch.score.data[i], single.score.data[0], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(batch.embedding.data[i], single.embedding.data[0], rtol=1e-12, atol=1e-14)


def test_recurrence_uses_frame_order(micro, micro_params, rng):
    v = rng.random((5, 3, 8, 8))
    a = model_forward(v, micro_params, micro).score.data
    b = model_forward(v[::-1].copy(), micro_params, micro).score.data
    assert a.tobytes() != b.tobytes()


def test_predict_labels_threshold():
    cfg = ModelConfig()
    assert predict_labels(np.array([[0.7], [0.5], [0.49]]), cfg).tolist() == [1, 1, 0]
    soft = ModelConfig(head="softmax")
    assert predict_labels(np.array([[0.3, 0.7], [0.8, 0.2]]), soft).tolist() == [1, 0]


def test_no_tsa_leaves_attention_unused(small_config, rng):
    from realsmilenet.tensor import Tape, backward

    cfg = ModelConfig(**{**small_config.to_dict(), "use_tsa": False})
    p = init_params(cfg, rng, dtype=np.float64)
    with Tape():
        backward(ops.sum(model_forward(rng.random((3, 3, 16, 16)), p, cfg, "eval").score))
    assert p["tsa.conv.W"].grad is None
    assert p["lstm.i.W"].grad is not None
