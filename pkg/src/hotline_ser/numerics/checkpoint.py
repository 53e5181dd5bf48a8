"""Binary checkpoint format.

Layout::

    b"SERCKPT1"                 8-byte magic
    uint64 little-endian        manifest length in bytes
    manifest                    UTF-8 JSON
    blob                        little-endian float32 values

The manifest carries ``schema_version``, free-form ``meta`` and a ``params``
list of ``{name, shape, offset, nbytes}`` entries, offsets relative to the
start of the blob.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SERCKPT1"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"schema_version": SCHEMA_VERSION, "meta": meta or {}, "params": entries},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def read_manifest(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", head)
        raw = fh.read(n)
        if len(raw) != n:
            raise CheckpointError(f"{path}: truncated manifest")
    return json.loads(raw.decode("utf-8")), 16 + n


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    manifest, start = read_manifest(path)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    blob = Path(path).read_bytes()[start:]
    params = {}
    for e in manifest["params"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: blob truncated at {e['name']}")
        params[e["name"]] = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return params, manifest["meta"]


def describe_checkpoint(path) -> list[dict]:
    """Name, shape and sha256 of every stored parameter."""
    params, _ = load_checkpoint(path)
    rows = []
    for name, arr in params.items():
        rows.append({
            "name": name,
            "shape": list(arr.shape),
            "sha256": hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest(),
        })
    return rows
