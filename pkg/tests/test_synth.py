import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from realsmilenet.data import load_frames, load_manifest, make_folds
from realsmilenet.exceptions import ArgumentError
from realsmilenet.synth import FaceGeometry, SynthConfig, posed_envelope, render_video, spontaneous_envelope, synth_generate


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_subjects=2, videos_per_subject=2, resolution=24, seed=5)
    synth_generate(cfg, tmp_path / "a")
    synth_generate(cfg, tmp_path / "b")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and a == b


def test_different_seed_differs(tmp_path):
    synth_generate(SynthConfig(n_subjects=1, videos_per_subject=1, resolution=16, seed=1), tmp_path / "a")
    synth_generate(SynthConfig(n_subjects=1, videos_per_subject=1, resolution=16, seed=2), tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")


def test_class_counts_match_request(tiny_synth):
    out, manifest = tiny_synth
    assert len(manifest) == 8 and manifest.counts == (4, 4)
    assert len(manifest.subjects) == 4
    reread = load_manifest(out / "manifest.json")
    assert reread.samples == manifest.samples
    assert all(s.frame_count >= 25 for s in reread)


def test_grayscale_generation(tmp_path):
    m = synth_generate(SynthConfig(n_subjects=1, videos_per_subject=2, resolution=16, channels=1), tmp_path)
    frames = load_frames(m.samples[0].frame_dir, 25, 5, 16, in_channels=1)
    assert frames.shape[1] == 1


@pytest.mark.parametrize(
    "kwargs", [{"n_subjects": 0}, {"duration": (0.1, 0.2)}, {"duration": (2.0, 1.0)}, {"channels": 2}, {"noise_level": -1}]
)
def test_invalid_synth_config(kwargs):
    with pytest.raises(ArgumentError):
        SynthConfig(**kwargs)


def test_envelopes_shapes(rng):
    tau = np.linspace(0, 1, 200)
    posed = posed_envelope(tau, rng)
    np.testing.assert_allclose(posed, posed[::-1], atol=0.02)  # symmetric up to grid sampling
    spont = spontaneous_envelope(tau, rng)
    assert 0.3 < np.argmax(spont) / 200 < 0.7
    assert spont.min() >= 0 and spont.max() <= 1


def test_eye_tracks_mouth_only_for_spontaneous(rng):
    geom = FaceGeometry.draw(rng)
    for label in (0, 1):
        v = render_video(label, 30, 32, np.random.default_rng(label), geom, noise_level=0.0).astype(float)
        eyes = v[:, 9:15, 9:23].mean(axis=(1, 2, 3))
        spread = eyes.max() - eyes.min()
        assert (spread > 5) if label == 1 else (spread < 1e-9)


def envelope_features(frames):
    """Two hand-coded statistics: log rise/fall time ratio and eye-mouth correlation."""
    r = frames.shape[-1]
    band = lambda a, b: slice(int(a * r), int(b * r))
    mouth = (frames[:, 0] - frames[:, 1])[:, band(0.6, 0.8), band(0.35, 0.65)].mean(axis=(1, 2))
    eyes = frames[:, :, band(0.3, 0.45), band(0.3, 0.7)].mean(axis=(1, 2, 3))
    m = np.convolve(mouth, np.ones(3) / 3, mode="same")
    above = np.flatnonzero(m >= m.min() + 0.5 * (m.max() - m.min()))
    peak = int(np.argmax(m))
    rise = (peak - above[0] + 1) / (above[-1] - peak + 1)
    return [np.log(rise), np.corrcoef(mouth, eyes)[0, 1]]


def test_two_feature_oracle_separates_classes(bench_synth):
    _, manifest = bench_synth
    X = np.array([envelope_features(load_frames(s.frame_dir, s.source_fps, s.source_fps, 64)) for s in manifest])
    y = manifest.labels
    subjects = np.array([s.subject_id for s in manifest])
    plan = make_folds(manifest, 4, seed=0)
    correct = 0
    for f in range(4):
        test = np.isin(subjects, plan.test_subjects(f))
        clf = LogisticRegression().fit(X[~test], y[~test])
        correct += int((clf.predict(X[test]) == y[test]).sum())
    accuracy = correct / len(y)
    print(f"two-feature oracle held-out accuracy {accuracy:.3f}")
    assert accuracy >= 0.95
