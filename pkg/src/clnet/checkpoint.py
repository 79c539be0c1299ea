"""Versioned parameter checkpoints.

Layout: the magic line "CLNET-CKPT-1", one JSON line describing entries
(name + shape, in file order) and free-form metadata, then the raw
little-endian float64 payloads concatenated in entry order.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"CLNET-CKPT-1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """arrays: ordered name -> array mapping; meta must be JSON-serializable."""
    entries = [{"name": name, "shape": list(np.asarray(a).shape)} for name, a in arrays.items()]
    header = json.dumps({"entries": entries, "meta": meta or {}})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (arrays dict, meta dict); rejects wrong magic or short files."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a CLNET-CKPT-1 checkpoint")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: bad checkpoint header ({exc})") from exc
        arrays = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError(f"{path}: truncated payload at {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after declared payload")
    return arrays, header.get("meta", {})
