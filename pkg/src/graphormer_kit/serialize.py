"""Versioned binary container for named arrays plus a JSON metadata header.

Checkpoints and preprocessing caches both need byte-for-byte reproducibility,
which rules out archive formats that embed timestamps. The layout here is
fully content-determined: magic, version, header length, canonical JSON
(sorted keys, fixed separators), then raw array bytes in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"GKITBIN1"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_container(path: str, meta: dict, arrays: list):
    """Write ``meta`` (JSON-serializable) plus ordered ``(name, ndarray)`` pairs."""
    names = [n for n, _ in arrays]
    if len(set(names)) != len(names):
        raise ValueError("duplicate array names in container")
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = _canonical_json({"meta": meta, "arrays": entries})
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_container(path: str):
    """Read back (meta, dict name -> ndarray)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a container file (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    arrays = {}
    for e in header["arrays"]:
        raw = body[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(_canonical_json(config_dict)).hexdigest()[:16]
