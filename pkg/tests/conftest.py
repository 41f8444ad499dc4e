import numpy as np
import pytest

from realsmilenet.gradcheck import micro_config
from realsmilenet.model import ModelConfig, init_params
from realsmilenet.synth import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro():
    return micro_config()


@pytest.fixture
def micro_params(micro):
    return init_params(micro, np.random.default_rng(0), dtype=np.float64)


@pytest.fixture
def small_config():
    """16x16 model that keeps every block but trains in well under a second."""
    return ModelConfig(resolution=16, fpn_channels=(4, 8), convlstm_hidden=8, head_conv_channels=8)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """4 subjects x 2 clips rendered at 32x32."""
    out = tmp_path_factory.mktemp("tiny_synth")
    manifest = synth_generate(SynthConfig(n_subjects=4, videos_per_subject=2, resolution=32, seed=3), out)
    return out, manifest


@pytest.fixture(scope="session")
def bench_synth(tmp_path_factory):
    """The default 12 x 4 synthetic benchmark (noise 0.05, seed 0)."""
    out = tmp_path_factory.mktemp("bench_synth")
    manifest = synth_generate(SynthConfig(), out)
    return out, manifest


@pytest.fixture(scope="session")
def trained_small(tiny_synth):
    """A few epochs of a 16x16 model on the tiny dataset, fold 0 of 2."""
    from realsmilenet.data import make_folds
    from realsmilenet.training import TrainConfig, VideoCache, train

    _, manifest = tiny_synth
    cfg = ModelConfig(resolution=16, fpn_channels=(4, 8), convlstm_hidden=8, head_conv_channels=8)
    plan = make_folds(manifest, 2, seed=0)
    cache = VideoCache()
    ckpt = train(manifest, plan, 0, cfg, TrainConfig(epochs=3, resolution=16, seed=2, batch_videos=2), cache=cache)
    return ckpt, manifest, plan, cache


# -- acceptance report ------------------------------------------------------------

_CRITERIA = []


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line, print it, and fail the test if it did not pass."""

    def report(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
