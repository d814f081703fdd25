"""Checkpoint container: JSON manifest + named raw little-endian arrays.

Layout:  magic line, 8-byte LE manifest length, manifest JSON, array payload
(concatenated in manifest order), then an 8-byte LE payload length and the
SHA-256 digest of the payload.  Arrays are float32 unless noted in the
manifest.  Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"WMCKPT1\n"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _array_entry(name: str, arr: np.ndarray) -> dict:
    return {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    manifest = dict(ckpt.manifest)
    manifest["format_version"] = FORMAT_VERSION
    arrays = {name: np.ascontiguousarray(a) for name, a in ckpt.arrays.items()}
    manifest["arrays"] = [_array_entry(n, a) for n, a in arrays.items()]
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(a.astype(a.dtype.newbyteorder("<")).tobytes() for a in arrays.values())
    digest = hashlib.sha256(payload).digest()

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(payload)
        f.write(struct.pack("<Q", len(payload)))
        f.write(digest)
    os.replace(tmp, path)


def _read_exact(f, n: int, path) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated checkpoint")
    return buf


def load_checkpoint(path, manifest_only: bool = False) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), path) != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        (mlen,) = struct.unpack("<Q", _read_exact(f, 8, path))
        try:
            manifest = json.loads(_read_exact(f, mlen, path).decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: corrupt manifest: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"{path}: unsupported format version {manifest.get('format_version')}")
        if manifest_only:
            return Checkpoint(manifest=manifest)

        arrays: dict[str, np.ndarray] = {}
        total = 0
        raw_parts = []
        for entry in manifest["arrays"]:
            dtype = np.dtype(entry["dtype"])
            nbytes = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(f, nbytes, path)
            raw_parts.append(raw)
            total += nbytes
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
        (plen,) = struct.unpack("<Q", _read_exact(f, 8, path))
        digest = _read_exact(f, 32, path)
        if plen != total:
            raise FormatError(f"{path}: payload length mismatch")
        if hashlib.sha256(b"".join(raw_parts)).digest() != digest:
            raise FormatError(f"{path}: payload digest mismatch")
    return Checkpoint(manifest=manifest, arrays=arrays)
