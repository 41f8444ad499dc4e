"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RSMN" | u32 version | u32 header length | UTF-8 JSON header
    | float32 tensor blobs in directory order | u32 CRC32 of everything before

The JSON header carries both configs, the tensor directory (name, shape,
byte offset into the blob region), metrics history, epoch, RNG state and
the Adam step counter.  Tensors are stored as float32.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .data import PathLike
from .exceptions import FormatError
from .model import ModelConfig, ModelParams, check_params, param_shapes
from .tensor import Tensor
from .training import AdamState, TrainConfig

MAGIC = b"RSMN"
FORMAT_VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ModelParams
    train_config: TrainConfig
    epoch: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    metrics: List[Dict[str, Any]] = field(default_factory=list)
    adam: Optional[AdamState] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def rng(self) -> np.random.Generator:
        """Generator restored to the saved state (fresh PCG64 when absent)."""
        gen = np.random.default_rng()
        if self.rng_state is not None:
            gen.bit_generator.state = self.rng_state
        return gen


def _directory(ckpt: Checkpoint) -> List[tuple]:
    entries = [(name, ckpt.params[name].data) for name in param_shapes(ckpt.model_config)]
    if ckpt.adam is not None:
        for name in sorted(ckpt.adam.m):
            entries.append((f"adam.m.{name}", ckpt.adam.m[name]))
            entries.append((f"adam.v.{name}", ckpt.adam.v[name]))
    return entries


def to_bytes(ckpt: Checkpoint) -> bytes:
    check_params(ckpt.params, ckpt.model_config)
    entries = _directory(ckpt)
    blobs, directory, offset = [], [], 0
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype=_BLOB_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
        "adam_t": None if ckpt.adam is None else ckpt.adam.t,
        "extra": ckpt.extra,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if 12 + hlen + 4 > len(buf):
        raise FormatError("checkpoint truncated inside header")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint checksum mismatch (file corrupt or truncated)")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
        model_config = ModelConfig.from_dict(header["model_config"])
        train_config = TrainConfig.from_dict(header["train_config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}") from exc

    blob_start, blob_end = 12 + hlen, len(buf) - 4
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        start = blob_start + entry["offset"]
        stop = start + int(np.prod(shape)) * _BLOB_DTYPE.itemsize
        if stop > blob_end:
            raise FormatError(f"tensor {entry['name']} extends past the end of the file")
        arrays[entry["name"]] = np.frombuffer(buf[start:stop], dtype=_BLOB_DTYPE).reshape(shape).astype(np.float32)

    params = ModelParams()
    for name in param_shapes(model_config):
        if name not in arrays:
            raise FormatError(f"checkpoint lacks tensor {name}")
        trainable = not name.endswith(ModelParams.BUFFER_SUFFIXES)
        params[name] = Tensor(arrays[name], requires_grad=trainable, name=name)
    check_params(params, model_config)
    adam = None
    if header.get("adam_t") is not None:
        adam = AdamState(t=int(header["adam_t"]))
        for key, arr in arrays.items():
            if key.startswith("adam.m."):
                adam.m[key[7:]] = arr
            elif key.startswith("adam.v."):
                adam.v[key[7:]] = arr
    return Checkpoint(
        model_config=model_config,
        params=params,
        train_config=train_config,
        epoch=int(header["epoch"]),
        rng_state=header.get("rng_state"),
        metrics=header.get("metrics", []),
        adam=adam,
        extra=header.get("extra", {}),
        format_version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint not found: {path}") from exc
    return from_bytes(buf)
