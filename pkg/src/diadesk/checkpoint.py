"""Single-file checkpoint format.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"DIACKPT1"
    bytes 8..15   u64    H, length of the manifest
    next H bytes  UTF-8 JSON manifest:
                    {"format": 1,
                     "meta": {...free-form JSON...},
                     "tensors": [{"name": str, "shape": [int, ...], "offset": int}, ...]}
    zero padding up to the next multiple of 8
    payload       raw float64 '<f8' buffers, row-major; ``offset`` is in bytes
                  from the start of the payload

Tensors are written in the order given, so saving the same mapping twice
yields byte-identical files.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"DIACKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    arrays = []
    for name, arr in tensors.items():
        src = np.asarray(arr, dtype="<f8")
        a = np.ascontiguousarray(src).reshape(src.shape)  # ascontiguousarray promotes 0-d to 1-d
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        arrays.append(a)
        offset += a.nbytes
    manifest = json.dumps(
        {"format": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    pad = (-(len(MAGIC) + 8 + len(manifest))) % 8
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(b"\x00" * pad)
        for a in arrays:
            fh.write(a.tobytes(order="C"))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise FormatError("not a diadesk checkpoint (bad magic)", 0)
    if len(blob) < 16:
        raise FormatError("truncated manifest length", 8)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise FormatError(f"manifest truncated, missing {16 + hlen - len(blob)} bytes", len(blob))
    try:
        manifest = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", 16) from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')!r}", 16)
    start = 16 + hlen
    start += (-start) % 8
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = start + entry["offset"]
        hi = lo + 8 * count
        if hi > len(blob):
            raise FormatError(f"tensor {entry['name']!r} truncated, missing {hi - len(blob)} bytes", len(blob))
        out[entry["name"]] = np.frombuffer(blob[lo:hi], dtype="<f8").reshape(shape).astype(np.float64)
    return out, manifest.get("meta", {})
