"""Deterministic synthetic smile videos for desk-scale verification.

Each frame is a schematic face: an elliptical head, two eyes and an
elliptical mouth whose width and opening follow a temporal amplitude
envelope.  Posed smiles (label 0) use a symmetric trapezoid envelope with
constant eye brightness.  Spontaneous smiles (label 1) use an asymmetric
smooth envelope with a mid-sequence peak and jitter, and their eye region
brightens in step with the mouth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .data import Manifest, PathLike, VideoSample, save_manifest
from .exceptions import ArgumentError, DataError

EYE_COUPLING = 0.45


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 12
    videos_per_subject: int = 4
    resolution: int = 64
    source_fps: float = 25.0
    duration: Tuple[float, float] = (1.0, 1.6)
    noise_level: float = 0.05
    seed: int = 0
    channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "duration", tuple(float(d) for d in self.duration))
        if len(self.duration) != 2:
            raise ArgumentError(f"duration must be a (lo, hi) pair, got {self.duration}")
        if self.n_subjects < 1 or self.videos_per_subject < 1 or self.resolution < 8:
            raise ArgumentError("n_subjects and videos_per_subject must be >= 1, resolution >= 8")
        lo, hi = self.duration
        if not 0 < lo <= hi:
            raise ArgumentError(f"duration range must satisfy 0 < lo <= hi, got {self.duration}")
        if int(lo * self.source_fps) < 6 or self.source_fps < 5:
            raise ArgumentError("shortest clip must give at least 2 frames at 5 fps")
        if self.channels not in (1, 3):
            raise ArgumentError("channels must be 1 or 3")
        if self.noise_level < 0:
            raise ArgumentError("noise_level must be non-negative")


@dataclass(frozen=True)
class FaceGeometry:
    """Per-subject layout offsets, in fractions of the frame."""

    dx: float
    dy: float
    scale: float
    tone: float
    mouth_width: float
    eye_level: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "FaceGeometry":
        return cls(
            dx=rng.uniform(-0.03, 0.03),
            dy=rng.uniform(-0.03, 0.03),
            scale=rng.uniform(0.93, 1.07),
            tone=rng.uniform(0.85, 1.1),
            mouth_width=rng.uniform(0.09, 0.12),
            eye_level=rng.uniform(0.2, 0.3),
        )


def posed_envelope(tau: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Symmetric trapezoid: linear onset, flat apex, mirrored offset."""
    start = rng.uniform(0.08, 0.18)
    ramp = rng.uniform(0.1, 0.15)
    peak = rng.uniform(0.8, 1.0)
    end = 1.0 - start
    up = np.clip((tau - start) / ramp, 0, 1)
    down = np.clip((end - tau) / ramp, 0, 1)
    return peak * np.minimum(up, down)


def spontaneous_envelope(tau: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Asymmetric smooth bump: short onset constant, longer offset, jitter."""
    centre = rng.uniform(0.4, 0.6)
    width_on = rng.uniform(0.1, 0.16)
    width_off = rng.uniform(0.24, 0.34)
    peak = rng.uniform(0.8, 1.0)
    width = np.where(tau < centre, width_on, width_off)
    env = peak * np.exp(-(((tau - centre) / width) ** 2))
    jitter = rng.normal(0, 0.03, size=tau.shape)
    return np.clip(env + jitter, 0, 1)


def _soft_ellipse(yy, xx, cy, cx, ry, rx, edge=0.06):
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1 - r) / edge + 0.5, 0, 1)


def render_frame(amp: float, eye_gain: float, geom: FaceGeometry, resolution: int, channels: int = 3) -> np.ndarray:
    """One noiseless frame as a float image H x W x C in [0, 1]."""
    c = (np.arange(resolution) + 0.5) / resolution
    yy, xx = np.meshgrid(c, c, indexing="ij")
    cy, cx, s = 0.5 + geom.dy, 0.5 + geom.dx, geom.scale
    skin = np.array([0.78, 0.62, 0.52]) * geom.tone
    eye = np.full(3, geom.eye_level + eye_gain * amp)
    mouth = np.array([0.45, 0.12, 0.14])

    img = np.full(yy.shape + (3,), 0.12)
    face = _soft_ellipse(yy, xx, cy, cx, 0.44 * s, 0.36 * s)[..., None]
    img = img * (1 - face) + skin * face
    for side in (-1, 1):
        m = _soft_ellipse(yy, xx, cy - 0.1 * s, cx + side * 0.13 * s, 0.045 * s, 0.075 * s)[..., None]
        img = img * (1 - m) + eye * m
    half_w = geom.mouth_width * s * (1 + 0.8 * amp)
    half_h = (0.02 + 0.05 * amp) * s
    m = _soft_ellipse(yy, xx, cy + 0.18 * s, cx, half_h, half_w)[..., None]
    img = img * (1 - m) + mouth * m
    img = np.clip(img, 0, 1)
    if channels == 1:
        img = img.mean(axis=2, keepdims=True)
    return img


def render_video(
    label: int,
    n_frames: int,
    resolution: int,
    rng: np.random.Generator,
    geom: Optional[FaceGeometry] = None,
    noise_level: float = 0.05,
    channels: int = 3,
) -> np.ndarray:
    """A full clip as uint8 frames, shape T x H x W x C."""
    if label not in (0, 1):
        raise ArgumentError(f"label must be 0 or 1, got {label}")
    if n_frames < 2:
        raise ArgumentError("a clip needs at least 2 frames")
    geom = geom or FaceGeometry.draw(rng)
    tau = np.linspace(0, 1, n_frames)
    env = spontaneous_envelope(tau, rng) if label == 1 else posed_envelope(tau, rng)
    gain = EYE_COUPLING if label == 1 else 0.0
    frames = []
    for a in env:
        img = render_frame(float(a), gain, geom, resolution, channels)
        if noise_level > 0:
            img = img + rng.normal(0, noise_level, size=img.shape)
        frames.append(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    return np.stack(frames)


def to_model_input(frames: np.ndarray) -> np.ndarray:
    """uint8 T x H x W x C frames -> float32 T x C x H x W in [0, 1]."""
    return (frames.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)


def synth_generate(config: SynthConfig, out_dir: PathLike) -> Manifest:
    """Render every clip to ``out_dir/videos/<id>/NNNNNN.png`` and write ``manifest.json``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    samples = []
    for s in range(config.n_subjects):
        geom = FaceGeometry.draw(np.random.default_rng([config.seed, s]))
        for j in range(config.videos_per_subject):
            rng = np.random.default_rng([config.seed, s, j + 1])
            label = (s + j) % 2
            duration = rng.uniform(*config.duration)
            n_frames = int(duration * config.source_fps)
            frames = render_video(label, n_frames, config.resolution, rng, geom, config.noise_level, config.channels)
            vid = f"s{s:02d}_v{j:02d}"
            frame_dir = out_dir / "videos" / vid
            frame_dir.mkdir(parents=True, exist_ok=True)
            for stale in frame_dir.glob("*.png"):
                stale.unlink()
            for t, frame in enumerate(frames):
                img = frame[:, :, 0] if frame.shape[2] == 1 else frame
                try:
                    Image.fromarray(img).save(frame_dir / f"{t:06d}.png", format="PNG")
                except OSError as exc:
                    raise DataError(f"cannot write frame to {frame_dir}: {exc}") from exc
            samples.append(
                VideoSample(vid, f"subj{s:02d}", label, frame_dir.resolve(), float(config.source_fps), len(frames))
            )
    manifest = Manifest(samples)
    save_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "synth_config.json").write_text(_config_json(config), encoding="utf-8")
    return manifest


def _config_json(config: SynthConfig) -> str:
    d = asdict(config)
    d["duration"] = list(config.duration)
    return json.dumps(d, indent=1, sort_keys=True) + "\n"
