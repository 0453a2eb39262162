"""Parameter checkpoint files.

Layout::

    b"OLBP1"                      magic
    uint32 (little endian)        length of the JSON manifest in bytes
    manifest                      {"version", "meta", "tensors": [{name, section, shape, offset}]}
    payload                       float32 little-endian, tensors back to back

``offset`` is the byte offset of a tensor inside the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"OLBP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, sections: Mapping[str, Mapping[str, np.ndarray]],
                    meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for section, tensors in sections.items():
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            entries.append({"name": name, "section": section, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    manifest = json.dumps({"version": VERSION, "meta": dict(meta or {}), "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:5]!r}")
    (mlen,) = struct.unpack("<I", raw[5:9])
    manifest = json.loads(raw[9:9 + mlen])
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
    payload = memoryview(raw)[9 + mlen:]
    sections: dict[str, dict[str, np.ndarray]] = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(payload[start:start + 4 * count], dtype="<f4").reshape(shape).astype(np.float32)
        sections.setdefault(e["section"], {})[e["name"]] = arr
    return sections, manifest["meta"]
