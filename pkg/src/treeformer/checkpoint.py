"""Binary checkpoints.

Layout::

    b"TFCKPT\\x00\\x00"  magic
    uint32 LE         format version
    uint32 LE         header length in bytes
    header            UTF-8 JSON (sorted keys): config echo, step, metric,
                      reserved ids, and the ordered tensor table (name, shape)
    payload           each tensor as little-endian float32, in table order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from treeformer.errors import CheckpointError
from treeformer.seq2seq import BOS, EOS, PAD

MAGIC = b"TFCKPT\x00\x00"
FORMAT_VERSION = 1
RESERVED_IDS = {"pad": PAD, "bos": BOS, "eos": EOS}


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    metric: float = 0.0
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        table = [{"name": name, "shape": list(arr.shape)} for name, arr in self.tensors.items()]
        header = {
            "config": self.config,
            "extra": self.extra,
            "metric": float(self.metric),
            "reserved_ids": RESERVED_IDS,
            "step": int(self.step),
            "tensors": table,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", self.version, len(blob)), blob]
        for arr in self.tensors.values():
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
        try:
            header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        if header.get("reserved_ids") != RESERVED_IDS:
            raise CheckpointError(f"reserved ids {header.get('reserved_ids')} differ from {RESERVED_IDS}")
        offset = 16 + hlen
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(raw):
                raise CheckpointError(f"payload truncated in tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
            offset = end
        if offset != len(raw):
            raise CheckpointError(f"{len(raw) - offset} trailing bytes after payload")
        return cls(config=header["config"], tensors=tensors, step=header["step"], metric=header["metric"],
                   extra=header.get("extra", {}), version=version)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    return Checkpoint.from_bytes(path.read_bytes())


def snapshot(named_params: dict, config: dict, step: int = 0, metric: float = 0.0, extra: dict | None = None) -> Checkpoint:
    tensors = {name: np.asarray(t.data, dtype=np.float32).copy() for name, t in named_params.items()}
    return Checkpoint(config=config, tensors=tensors, step=step, metric=metric, extra=extra or {})


def restore(named_params: dict, checkpoint: Checkpoint) -> None:
    """Copy checkpoint tensors into live parameters, checking names and shapes."""
    missing = set(named_params) - set(checkpoint.tensors)
    unknown = set(checkpoint.tensors) - set(named_params)
    if missing or unknown:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unknown)}")
    for name, param in named_params.items():
        arr = checkpoint.tensors[name]
        if arr.shape != param.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {param.shape}")
        param.data[...] = arr
