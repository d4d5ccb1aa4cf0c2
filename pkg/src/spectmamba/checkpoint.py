"""Checkpoint files.

Layout (little-endian)::

    b"SMCK" | u32 format version | u64 header length | JSON header | float32 payload

The JSON header holds the step, the training config snapshot, the confidence
state and a ``tensors`` table of ``{name, shape, offset}`` entries (offsets in
float32 elements into the payload). Tensor names are prefixed ``param/``,
``adam_m/`` or ``adam_v/``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .cbr import ConfidenceState
from .errors import AudioIOError, ValidationError
from .optim import AdamState

MAGIC = b"SMCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    confidence: ConfidenceState = field(default_factory=ConfidenceState)
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
    arrays += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]
    table, chunks, offset = [], [], 0
    for name, arr in arrays:
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(flat.tobytes())
        offset += flat.size
    header = {
        "format_version": FORMAT_VERSION,
        "step": int(ckpt.step),
        "adam_step": int(ckpt.adam.step),
        "config": ckpt.config,
        "confidence": asdict(ckpt.confidence),
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise ValidationError("checkpoint is truncated")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    payload = np.frombuffer(raw, dtype="<f4", offset=_PREFIX.size + hlen)
    params, m, v = {}, {}, {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"]))
        start = entry["offset"]
        if start + count > payload.size:
            raise ValidationError(f"checkpoint payload too short for {entry['name']}")
        arr = payload[start:start + count].astype(np.float32).reshape(entry["shape"])
        kind, name = entry["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][name] = arr
    return Checkpoint(params=params, config=header["config"],
                      confidence=ConfidenceState(**header["confidence"]),
                      adam=AdamState(header.get("adam_step", 0), m, v), step=header["step"])


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(to_bytes(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise AudioIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise AudioIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
