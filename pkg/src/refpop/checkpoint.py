"""Versioned model checkpoints: JSON header + raw little-endian float64 segments."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .agents import ListenerArch, SpeakerArch
from .params import ParameterStore

MAGIC = b"REFPOP-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, arch, store: ParameterStore,
                    world_hash: str = "", meta: dict | None = None) -> None:
    header = {
        "version": VERSION,
        "kind": kind,
        "arch": arch.to_dict(),
        "world_hash": world_hash,
        "meta": meta or {},
        "segments": [{"name": n, "shape": list(s)} for n, s in store.shapes().items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(store.flat(), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[str, object, ParameterStore, dict]:
    """Returns (kind, arch, store, header). Raises CheckpointError on format issues."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a refpop checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version "
                                  f"{header.get('version')}")
        raw = f.read()
    store = ParameterStore()
    offset = 0
    flat = np.frombuffer(raw, dtype="<f8")
    for seg in header["segments"]:
        shape = tuple(seg["shape"])
        size = int(np.prod(shape)) if shape else 1
        store.add(seg["name"], flat[offset:offset + size].reshape(shape).copy())
        offset += size
    if offset != flat.size:
        raise CheckpointError(f"{path}: segment sizes do not match payload")
    kind = header["kind"]
    arch_cls = SpeakerArch if kind == "speaker" else ListenerArch
    arch = arch_cls(**header["arch"])
    return kind, arch, store, header
