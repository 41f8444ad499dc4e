"""Acceptance criteria, one reported line each.

The end-to-end, permutation and No-TSA checks share one set of training runs
(3 seeds x 4 subject-disjoint folds per variant on the 12 x 4 synthetic
benchmark), so the whole module takes roughly an hour on one core.
"""

import dataclasses
import time

import numpy as np
import pytest

from realsmilenet import cli, ops
from realsmilenet.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from realsmilenet.data import Manifest, VideoSample, make_folds
from realsmilenet.gradcheck import run_suite
from realsmilenet.model import (
    ConvLSTMState,
    ModelConfig,
    convlstm_gates,
    convlstm_step,
    init_params,
    nonlocal_forward,
    tsa_forward,
)
from realsmilenet.synth import FaceGeometry, SynthConfig, render_video, synth_generate, to_model_input
from realsmilenet.tensor import Tensor
from realsmilenet.training import TrainConfig, VideoCache, evaluate, predict_scores, train

from test_model import brute_force_nonlocal

SEEDS = (0, 1, 2)
K = 4


class Benchmark:
    """Memoised default-protocol runs keyed by (variant, seed, fold)."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.cache = VideoCache()
        self.runs = {}

    def plan(self, seed):
        return make_folds(self.manifest, K, seed=seed)

    def permuted(self, seed, fold):
        """Training-split labels shuffled; held-out labels untouched."""
        train_split, _ = self.plan(seed).split(self.manifest, fold)
        ids = [s.id for s in train_split]
        shuffled = np.random.default_rng(1000 + 10 * seed + fold).permutation(train_split.labels)
        new = dict(zip(ids, shuffled))
        return Manifest([dataclasses.replace(s, label=int(new[s.id])) if s.id in new else s for s in self.manifest])

    def run(self, variant, seed, fold):
        key = (variant, seed, fold)
        if key not in self.runs:
            t0 = time.perf_counter()
            mc = ModelConfig(use_tsa=variant != "no_tsa")
            tc = TrainConfig(seed=seed, eval_every=0)
            manifest = self.permuted(seed, fold) if variant == "permuted" else self.manifest
            plan = self.plan(seed)
            ckpt = train(manifest, plan, fold, mc, tc, cache=self.cache)
            train_split, _ = plan.split(manifest, fold)
            _, test_split = plan.split(self.manifest, fold)
            self.runs[key] = dict(
                ckpt=ckpt,
                train_acc=evaluate(ckpt, train_split, self.cache).accuracy,
                test_acc=evaluate(ckpt, test_split, self.cache).accuracy,
                seconds=time.perf_counter() - t0,
            )
        return self.runs[key]

    def grid(self, variant):
        return [self.run(variant, s, f) for s in SEEDS for f in range(K)]


@pytest.fixture(scope="module")
def bench(bench_synth):
    return Benchmark(bench_synth[1])


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# -- analytic and oracle checks ------------------------------------------------------


def test_gradient_oracle_suite(criterion):
    t0 = time.perf_counter()
    results = run_suite("double") + run_suite("single")
    seconds = time.perf_counter() - t0
    failed = [r.op for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    criterion(
        "gradient oracle suite",
        not failed and seconds < 120,
        f"{len(results)} checks (double+single, incl. micro-model), failed={failed}, "
        f"max_rel_err={worst:.2e}, {seconds:.1f}s (< 120s)",
    )


def test_convlstm_analytic_traces(criterion):
    rng = np.random.default_rng(5)
    p = init_params(ModelConfig(), rng, dtype=np.float64)
    for name, t in p.items():
        if name.startswith("lstm."):
            t.data = np.zeros_like(t.data)
    e = T(rng.standard_normal((2, 32, 6, 6)))
    zero = T(np.zeros((2, 32, 6, 6)))
    i, f, o, g = convlstm_gates(e, zero, p)
    exact = all(np.all(gate.data == v) for gate, v in ((i, 0.5), (f, 0.5), (o, 0.5), (g, 0.0)))
    exact &= not convlstm_step(e, ConvLSTMState(zero, zero), p).c.data.any()

    c0 = 4 * rng.standard_normal((2, 32, 6, 6))
    state = convlstm_step(e, ConvLSTMState(zero, T(c0)), p)
    err = max(np.abs(state.c.data - 0.5 * c0).max(), np.abs(state.h.data - 0.5 * np.tanh(0.5 * c0)).max())
    criterion("ConvLSTM analytic traces", exact and err <= 1e-6,
              f"zero-weight gates exact={exact}, c0=C case max_err={err:.1e} (<= 1e-6)")


def test_tsa_identity(criterion):
    rng = np.random.default_rng(6)
    p = init_params(ModelConfig(), rng)
    assert not p["tsa.conv.b"].data.any()
    frames = rng.random((100, 3, 48, 48)).astype(np.float32)
    x = Tensor(frames)
    same = tsa_forward(x, x, p).data.tobytes() == frames.tobytes()
    criterion("TSA identity", same, "TSA(x, x) == x bit-exact on 100 random 48x48 frames")


def test_nonlocal_brute_force(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for s in (1, 2, 3, 4):
        for hidden in (4, 6):
            p = init_params(ModelConfig(resolution=16, convlstm_hidden=hidden), rng, dtype=np.float64)
            for k in ("nl.theta.b", "nl.phi.b", "nl.g.b", "nl.z.b"):
                p[k].data = rng.standard_normal(p[k].shape)
            x = rng.standard_normal((2, hidden, s, s))
            worst = max(worst, np.abs(nonlocal_forward(T(x), p).data - brute_force_nonlocal(x, p)).max())
    criterion("NonLocal brute-force equivalence", worst <= 1e-6, f"P in {{1,4,9,16}}, max_err={worst:.1e} (<= 1e-6)")


# -- synthetic benchmark ----------------------------------------------------------------


@pytest.mark.slow
def test_synthetic_end_to_end(bench, criterion):
    runs = bench.grid("full")
    train_acc = np.mean([r["train_acc"] for r in runs])
    test_acc = np.mean([r["test_acc"] for r in runs])
    minutes = sum(r["seconds"] for r in runs) / 60
    criterion(
        "synthetic end-to-end",
        train_acc >= 0.95 and test_acc >= 0.85 and minutes < 45,
        f"3 seeds x {K} folds, mean train={train_acc:.3f} (>= 0.95, min {min(r['train_acc'] for r in runs):.3f}), "
        f"mean held-out={test_acc:.3f} (>= 0.85), {minutes:.1f} min on 1 core (< 45)",
    )


@pytest.mark.slow
def test_label_permutation_control(bench, criterion):
    acc = np.mean([r["test_acc"] for r in bench.grid("permuted")])
    criterion("label-permutation control", 0.35 <= acc <= 0.65, f"mean held-out={acc:.3f} (in [0.35, 0.65])")


@pytest.mark.slow
def test_no_tsa_ablation_direction(bench, criterion):
    full = np.mean([r["test_acc"] for r in bench.grid("full")])
    no_tsa = np.mean([r["test_acc"] for r in bench.grid("no_tsa")])
    criterion("No-TSA ablation direction", no_tsa <= full + 0.02,
              f"full={full:.3f}, no-TSA={no_tsa:.3f} (no-TSA <= full + 0.02)")


@pytest.mark.slow
def test_variable_length(bench, criterion):
    ckpt = bench.run("full", 0, 0)["ckpt"]
    rng = np.random.default_rng(8)
    geom = FaceGeometry.draw(rng)
    clips = [to_model_input(render_video(1, n, 48, rng, geom)) for n in (2, 9, 71)]
    scores = [float(predict_scores([c], ckpt.params, ckpt.model_config)[0].ravel()[0]) for c in clips]
    ok = all(np.isfinite(s) and 0 < s < 1 for s in scores)
    criterion("variable-length robustness", ok,
              "lengths 2/9/71 -> " + ", ".join(f"{s:.4f}" for s in scores) + " (finite, in (0,1))")


@pytest.mark.slow
def test_determinism_and_persistence(bench, criterion, tmp_path):
    first = bench.run("full", 0, 0)
    again = train(bench.manifest, bench.plan(0), 0, ModelConfig(), TrainConfig(seed=0, eval_every=0), cache=bench.cache)
    same_history = first["ckpt"].metrics == again.metrics

    blob = to_bytes(first["ckpt"])
    path = save_checkpoint(first["ckpt"], tmp_path / "run.rsmn")
    loaded = load_checkpoint(path)
    round_trip = path.read_bytes() == blob and to_bytes(loaded) == blob and to_bytes(from_bytes(blob)) == blob

    _, test_split = bench.plan(0).split(bench.manifest, 0)
    a = evaluate(first["ckpt"], test_split, bench.cache).scores
    b = evaluate(loaded, test_split, VideoCache()).scores
    stable = np.asarray(a).tobytes() == np.asarray(b).tobytes()
    criterion("determinism & persistence", same_history and round_trip and stable,
              f"history identical={same_history}, byte round trip={round_trip}, eval bitwise stable={stable}")


# -- loss weighting ------------------------------------------------------------------------


def unweighted_bce(score, y, config):
    """Plain mean binary cross-entropy written with tape ops."""
    p = ops.reshape(score, (score.shape[0],))
    yt = Tensor(np.asarray(y, dtype=p.dtype))
    one = Tensor(np.ones(p.shape, dtype=p.dtype))
    pos = ops.mul(yt, ops.log(p))
    neg = ops.mul(ops.sub(one, yt), ops.log(ops.sub(one, p)))
    return ops.scale(ops.mean(ops.add(pos, neg)), -1.0)


@pytest.mark.slow
def test_loss_weighting_equivalence(bench, criterion):
    plan = bench.plan(0)
    tc = TrainConfig(seed=4, epochs=1, weighting="unit")
    unit = train(bench.manifest, plan, 0, ModelConfig(), tc, cache=bench.cache)
    hand = train(bench.manifest, plan, 0, ModelConfig(), tc, cache=bench.cache, loss_fn=unweighted_bce)
    a, b = unit.metrics[0]["loss"], hand.metrics[0]["loss"]
    criterion("loss-weighting equivalence", abs(a - b) <= 1e-6 and unit.extra["alpha"] == unit.extra["beta"] == 1.0,
              f"epoch-0 unit={a:.8f}, hand-written BCE={b:.8f}, |diff|={abs(a - b):.1e} (<= 1e-6)")


# -- folds and sweep ----------------------------------------------------------------------


def test_fold_protocol_property(criterion):
    rng = np.random.default_rng(9)
    bad = 0
    for trial in range(1000):
        n_subjects = int(rng.integers(1, 30))
        k = int(rng.integers(1, n_subjects + 1))
        samples = [
            VideoSample(f"v{i}", f"s{int(rng.integers(n_subjects))}", int(rng.integers(2)), None, 25.0, 10)
            for i in range(int(rng.integers(n_subjects, 4 * n_subjects + 1)))
        ]
        manifest = Manifest(samples)
        k = min(k, len(manifest.subjects))
        plan = make_folds(manifest, k, seed=trial)
        tests = [set(plan.test_subjects(f)) for f in range(k)]
        disjoint = all(not (tests[i] & tests[j]) for i in range(k) for j in range(i + 1, k))
        exhaustive = set().union(*tests) == set(manifest.subjects)
        split_ok = all(
            not ({s.subject_id for s in tr} & {s.subject_id for s in te}) and len(tr) + len(te) == len(manifest)
            for tr, te in (plan.split(manifest, f) for f in range(k))
        )
        bad += not (disjoint and exhaustive and split_ok)
    criterion("fold protocol property", bad == 0, f"1000 random manifests, {bad} violations")


@pytest.mark.slow
def test_resolution_fps_sweep(tmp_path, criterion):
    # clips of 2 s or more so that 1 FPS still yields two samples per video
    data = tmp_path / "data"
    synth_generate(SynthConfig(n_subjects=4, videos_per_subject=2, resolution=112, duration=(2.0, 2.6), seed=11), data)
    assert cli.main(["folds", "--manifest", str(data / "manifest.json"), "--k", "2", "--out", str(tmp_path / "f.json")]) == 0
    out = tmp_path / "grid.csv"
    code = cli.main(["sweep", "--manifest", str(data / "manifest.json"), "--folds", str(tmp_path / "f.json"),
                     "--fold", "0", "--epochs", "2", "--batch-videos", "4", "--out", str(out)])
    rows = out.read_text().splitlines()
    cells = {tuple(r.split(",")[:2]) for r in rows[1:]}
    expected = {(str(r), str(f)) for r in (48, 64, 96, 112) for f in (1, 3, 5, 7)}
    finite = all(r.split(",")[2] != "nan" for r in rows[1:])
    criterion("resolution x FPS sweep", code == 0 and len(rows) == 17 and cells == expected and finite,
              f"{len(rows) - 1} rows, all 4x4 cells present={cells == expected}, no failed cells={finite}")
