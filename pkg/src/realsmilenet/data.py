"""Manifests of frame-directory videos, frame sampling, preprocessing and folds."""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .exceptions import ArgumentError, DataError, InputError

PathLike = Union[str, os.PathLike]
_FRAME_RE = re.compile(r"^(\d+)\.png$")


@dataclass(frozen=True)
class VideoSample:
    id: str
    subject_id: str
    label: int
    frame_dir: Path
    source_fps: float
    frame_count: int
    crop: Optional[Tuple[int, int, int, int]] = None

    def to_json(self, root: Optional[Path] = None) -> dict:
        frame_dir = self.frame_dir
        if root is not None:
            try:
                frame_dir = frame_dir.relative_to(root)
            except ValueError:
                pass
        out = {
            "id": self.id,
            "subject_id": self.subject_id,
            "label": self.label,
            "frame_dir": frame_dir.as_posix(),
            "source_fps": self.source_fps,
        }
        if self.crop is not None:
            out["crop"] = list(self.crop)
        return out


@dataclass
class Manifest:
    samples: List[VideoSample] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DataError(f"duplicate video id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def n_spontaneous(self) -> int:
        return sum(1 for s in self.samples if s.label == 1)

    @property
    def n_posed(self) -> int:
        return sum(1 for s in self.samples if s.label == 0)

    @property
    def counts(self) -> Tuple[int, int]:
        """(n_spontaneous, n_posed)."""
        return self.n_spontaneous, self.n_posed

    @property
    def subjects(self) -> List[str]:
        return sorted({s.subject_id for s in self.samples})

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)

    def subset(self, keep) -> "Manifest":
        return Manifest([s for s in self.samples if keep(s)])

    def require_both_classes(self) -> None:
        if self.n_spontaneous == 0 or self.n_posed == 0:
            raise DataError(f"need both classes, got {self.n_spontaneous} spontaneous / {self.n_posed} posed")


def frame_files(frame_dir: PathLike) -> List[Path]:
    """PNG frames of a video directory in temporal order.

    Names must be zero-padded integers of one common width ("000042.png").
    """
    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise DataError(f"frame directory not found: {frame_dir}")
    found = []
    for p in frame_dir.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), len(m.group(1)), p))
    found.sort()
    if len({w for _, w, _ in found}) > 1:
        raise DataError(f"{frame_dir}: frame names are not zero-padded to a common width")
    indices = [i for i, _, _ in found]
    if len(set(indices)) != len(indices):
        raise DataError(f"{frame_dir}: repeated frame index")
    return [p for _, _, p in found]


def _parse_sample(entry: dict, root: Path, require_frames: bool) -> VideoSample:
    if not isinstance(entry, dict):
        raise DataError(f"manifest entries must be objects, got {type(entry).__name__}")
    missing = {"id", "subject_id", "label", "frame_dir", "source_fps"} - set(entry)
    if missing:
        raise DataError(f"manifest entry {entry.get('id', '?')!r} lacks {sorted(missing)}")
    vid = str(entry["id"])
    label = entry["label"]
    if isinstance(label, bool) or label not in (0, 1):
        raise DataError(f"video {vid!r}: label must be 0 or 1, got {label!r}")
    fps = entry["source_fps"]
    if isinstance(fps, bool) or not isinstance(fps, (int, float)) or not fps > 0:
        raise DataError(f"video {vid!r}: source_fps must be positive, got {fps!r}")
    frame_dir = Path(entry["frame_dir"])
    if not frame_dir.is_absolute():
        frame_dir = root / frame_dir
    crop = entry.get("crop")
    if crop is not None:
        if not isinstance(crop, (list, tuple)) or len(crop) != 4 or not all(isinstance(c, (int, float)) for c in crop):
            raise DataError(f"video {vid!r}: crop must be [x, y, w, h]")
        crop = tuple(int(c) for c in crop)
        if crop[2] <= 0 or crop[3] <= 0 or crop[0] < 0 or crop[1] < 0:
            raise DataError(f"video {vid!r}: degenerate crop box {list(crop)}")
    frame_count = 0
    if require_frames:
        if not frame_dir.is_dir():
            raise DataError(f"video {vid!r}: missing frame_dir {frame_dir}")
        frame_count = len(frame_files(frame_dir))
        if frame_count < 2:
            raise DataError(f"video {vid!r}: needs at least 2 frames, found {frame_count}")
    return VideoSample(vid, str(entry["subject_id"]), int(label), frame_dir, float(fps), frame_count, crop)


def load_manifest(path: PathLike, require_frames: bool = True) -> Manifest:
    """Parse and validate a JSON manifest; relative frame_dirs resolve against its folder."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise DataError("manifest must be a JSON array of video objects")
    root = path.resolve().parent
    samples = [_parse_sample(e, root, require_frames) for e in raw]
    return Manifest(samples)


def save_manifest(manifest: Manifest, path: PathLike) -> Path:
    path = Path(path)
    root = path.resolve().parent
    text = json.dumps([s.to_json(root) for s in manifest.samples], indent=1, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# frames


def sample_frames(frame_count: int, source_fps: float, target_fps: float) -> List[int]:
    """Indices floor(k * source/target) for k = 0, 1, ... below frame_count."""
    if not target_fps > 0 or source_fps < target_fps:
        raise ArgumentError(f"need source_fps >= target_fps > 0, got {source_fps} and {target_fps}")
    step = source_fps / target_fps
    out = []
    k = 0
    while True:
        idx = int(math.floor(k * step + 1e-9))
        if idx >= frame_count:
            break
        out.append(idx)
        k += 1
    if len(out) < 2:
        raise InputError(
            f"{frame_count} frames at {source_fps} fps give {len(out)} sample(s) at {target_fps} fps; need 2"
        )
    return out


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of an H x W x C float image with half-pixel centres."""
    h, w = image.shape[:2]

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    y0, y1, wy = axis_weights(h, out_h)
    x0, x1, wx = axis_weights(w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def center_square(h: int, w: int) -> Tuple[int, int, int, int]:
    side = min(h, w)
    return ((w - side) // 2, (h - side) // 2, side, side)


def preprocess_frame(
    image: np.ndarray, crop: Optional[Sequence[int]] = None, resolution: int = 48, in_channels: Optional[int] = None
) -> np.ndarray:
    """Crop, resize and scale one 8-bit frame to a C x R x R float32 array in [0, 1].

    Without a crop box the largest centred square is used.  ``in_channels``
    converts between grayscale (1) and RGB (3) when given.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise InputError(f"frame must be H x W or H x W x C, got shape {img.shape}")
    h, w = img.shape[:2]
    x, y, cw, ch = center_square(h, w) if crop is None else tuple(int(v) for v in crop)
    if cw <= 0 or ch <= 0 or x < 0 or y < 0 or x + cw > w or y + ch > h:
        raise InputError(f"crop box {[x, y, cw, ch]} is degenerate or outside the {w}x{h} frame")
    patch = img[y : y + ch, x : x + cw].astype(np.float64) / 255.0
    if in_channels is not None and patch.shape[2] != in_channels:
        if in_channels == 1:
            patch = patch[:, :, :3].mean(axis=2, keepdims=True)
        elif in_channels == 3 and patch.shape[2] == 1:
            patch = np.repeat(patch, 3, axis=2)
        else:
            raise InputError(f"cannot convert {patch.shape[2]}-channel frame to {in_channels} channels")
    out = bilinear_resize(patch, resolution, resolution)
    return np.clip(out, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def read_frame(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def load_frames(
    frame_dir: PathLike,
    source_fps: float,
    target_fps: float,
    resolution: int,
    in_channels: int = 3,
    crop: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Resample a frame directory to ``target_fps`` and preprocess: T x C x R x R."""
    files = frame_files(frame_dir)
    idx = sample_frames(len(files), source_fps, min(target_fps, source_fps))
    return np.stack([preprocess_frame(read_frame(files[i]), crop, resolution, in_channels) for i in idx])


def load_video(sample: VideoSample, target_fps: float, resolution: int, in_channels: int = 3) -> np.ndarray:
    return load_frames(sample.frame_dir, sample.source_fps, target_fps, resolution, in_channels, sample.crop)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: Dict[str, int]

    def __post_init__(self):
        if self.k < 1:
            raise ArgumentError(f"k must be >= 1, got {self.k}")
        bad = {s: f for s, f in self.assignment.items() if not 0 <= f < self.k}
        if bad:
            raise DataError(f"fold indices outside [0, {self.k}): {bad}")

    def test_subjects(self, fold: int) -> List[str]:
        self._check_fold(fold)
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_subjects(self, fold: int) -> List[str]:
        self._check_fold(fold)
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def split(self, manifest: Manifest, fold: int) -> Tuple[Manifest, Manifest]:
        """(train, test) manifests for ``fold``; every subject must be assigned."""
        self._check_fold(fold)
        unknown = set(manifest.subjects) - set(self.assignment)
        if unknown:
            raise DataError(f"subjects missing from fold plan: {sorted(unknown)}")
        train = manifest.subset(lambda s: self.assignment[s.subject_id] != fold)
        test = manifest.subset(lambda s: self.assignment[s.subject_id] == fold)
        return train, test

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ArgumentError(f"fold index {fold} outside [0, {self.k})")

    def to_json(self) -> dict:
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "FoldPlan":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(int(raw["k"]), {str(s): int(f) for s, f in raw["assignment"].items()})
        except FileNotFoundError as exc:
            raise DataError(f"fold plan not found: {path}") from exc
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DataError(f"malformed fold plan {path}: {exc}") from exc


def make_folds(manifest: Union[Manifest, Iterable[str]], k: int, seed: int = 0) -> FoldPlan:
    """Shuffle subjects with ``seed`` and deal them round-robin into ``k`` folds."""
    subjects = manifest.subjects if isinstance(manifest, Manifest) else sorted(set(manifest))
    if k < 1 or k > len(subjects):
        raise ArgumentError(f"k={k} folds need between 1 and {len(subjects)} (the subject count)")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return FoldPlan(k, {subjects[j]: pos % k for pos, j in enumerate(order)})
