"""Flat parameter blobs indexed by a plain-text manifest.

Blob: the arrays' elements back to back as little-endian float32.
Manifest, one record per line::

    schema 1
    meta <key> <value>
    tensor <name> <shape, comma separated or "-" for scalars> <byte offset> <byte count>
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from adapter.errors import CheckpointError

SCHEMA_VERSION = 1
_LE_F32 = np.dtype("<f4")


def atomic_write(path, data) -> None:
    """Write ``data`` (bytes or str) to ``path`` via a temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "\n", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(tensors: Dict[str, np.ndarray], meta: Dict[str, str] = None) -> Tuple[str, bytes]:
    lines = [f"schema {SCHEMA_VERSION}"]
    for key, value in (meta or {}).items():
        value = str(value)
        if any(ch.isspace() for ch in key) or "\n" in value:
            raise ValueError(f"meta entry {key!r} not representable")
        lines.append(f"meta {key} {value}")
    chunks, offset = [], 0
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        shape = ",".join(str(n) for n in np.shape(arr)) or "-"
        lines.append(f"tensor {name} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    return "\n".join(lines) + "\n", b"".join(chunks)


def decode(manifest: str, blob: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    tensors, meta = {}, {}
    lines = manifest.splitlines()
    if not lines or lines[0] != f"schema {SCHEMA_VERSION}":
        raise CheckpointError(f"unsupported manifest header {lines[:1]}")
    for lineno, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            try:
                name, shape_s, offset_s, count_s = rest.split(" ")
                shape = () if shape_s == "-" else tuple(int(n) for n in shape_s.split(","))
                offset, count = int(offset_s), int(count_s)
            except ValueError as exc:
                raise CheckpointError(f"manifest line {lineno} malformed: {line!r}") from exc
            if offset + count > len(blob) or count != 4 * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"tensor {name} out of blob bounds or wrong size")
            tensors[name] = np.frombuffer(blob, dtype=_LE_F32, count=count // 4, offset=offset).reshape(shape).copy()
        elif line.strip():
            raise CheckpointError(f"manifest line {lineno} has unknown record {kind!r}")
    return tensors, meta


def save(directory, tensors: Dict[str, np.ndarray], meta: Dict[str, str] = None,
         manifest_name: str = "manifest.txt", blob_name: str = "params.bin") -> None:
    directory = Path(directory)
    manifest, blob = encode(tensors, meta)
    atomic_write(directory / blob_name, blob)
    atomic_write(directory / manifest_name, manifest)


def load(directory, manifest_name: str = "manifest.txt", blob_name: str = "params.bin"):
    directory = Path(directory)
    try:
        manifest = (directory / manifest_name).read_text(encoding="utf-8")
        blob = (directory / blob_name).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint in {directory}: {exc}") from exc
    return decode(manifest, blob)
