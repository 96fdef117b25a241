"""Checkpoint files: one line of JSON header, then little-endian float32 tensor data.

The header holds ``format_version``, ``model_config`` and a ``tensors``
directory of ``{name, shape, offset}`` entries (offsets in bytes from the
start of the data section, in directory order). Other header keys carry
training state and are passed through untouched.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointParseError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class CheckpointData:
    model_config: dict
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, model_config: dict, tensors: dict[str, np.ndarray],
                    extra: dict | None = None) -> Path:
    path = Path(path)
    directory, offset = [], 0
    for name, t in tensors.items():
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * _DTYPE.itemsize
    header = dict(extra or {})
    header.update(format_version=FORMAT_VERSION, model_config=model_config, tensors=directory)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8") + b"\n")
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype=_DTYPE).tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected_shapes: dict[str, tuple] | None = None) -> CheckpointData:
    """Read a checkpoint; nothing is returned unless the whole file validates."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointParseError("checkpoint header is not newline-terminated")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointParseError(f"unreadable checkpoint header: {exc}") from None
    if not isinstance(header, dict) or "format_version" not in header:
        raise CheckpointParseError("checkpoint header lacks format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {header['format_version']}, expected {FORMAT_VERSION}")
    try:
        directory = header["tensors"]
        model_config = header["model_config"]
    except KeyError as exc:
        raise CheckpointParseError(f"checkpoint header lacks {exc}") from None
    data = memoryview(raw)[nl + 1:]
    tensors = {}
    for entry in directory:
        shape = tuple(entry["shape"])
        n = math.prod(shape) * _DTYPE.itemsize
        start = entry["offset"]
        if start + n > len(data):
            raise CheckpointTruncatedError(f"tensor {entry['name']} extends past end of file")
        tensors[entry["name"]] = np.frombuffer(data[start:start + n], dtype=_DTYPE).reshape(shape).astype(np.float32)
    expected_size = sum(math.prod(e["shape"]) for e in directory) * _DTYPE.itemsize
    if len(data) != expected_size:
        raise CheckpointTruncatedError(f"data section is {len(data)} bytes, expected {expected_size}")
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise CheckpointShapeError(f"tensor {name} missing from checkpoint")
            if tensors[name].shape != tuple(shape):
                raise CheckpointShapeError(f"tensor {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
    extra = {k: v for k, v in header.items() if k not in ("format_version", "model_config", "tensors")}
    return CheckpointData(model_config, tensors, extra)
