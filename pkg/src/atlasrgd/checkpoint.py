"""Checkpoint file format.

Layout: the magic string ``ATLASRGD1`` followed by a newline, a JSON manifest
(human readable) with per-array names/shapes/byte offsets and arbitrary
metadata, a blank line, then the concatenated little-endian float64 payloads.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"ATLASRGD1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    entries = []
    offset = 0
    blobs = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = {"meta": meta or {}, "arrays": entries}
    header = json.dumps(manifest, indent=1).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(header)
        f.write(b"\n\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Return ``(arrays, meta)``; rejects files without the expected magic."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC + b"\n"):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    body = data[len(MAGIC) + 1:]
    sep = body.index(b"\n\n")
    manifest = json.loads(body[:sep].decode())
    payload = body[sep + 2:]
    arrays = {}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
        arrays[e["name"]] = a.reshape(shape).copy()
    return arrays, manifest["meta"]
