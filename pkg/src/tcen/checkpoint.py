"""Binary checkpoint container.

Layout: 8-byte magic, little-endian uint32 header length, a UTF-8 JSON
header (sorted keys), then the raw arrays as little-endian float64 in
header order.  The header records each array's name, shape and byte offset
plus a format version, the model config and free-form metadata (trainer
state).  Saving the same state twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

MAGIC = b"TCENCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str                      # "tcen" or "noiser"
    config: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"version": VERSION, "kind": ckpt.kind, "config": ckpt.config,
              "entries": entries, "meta": ckpt.meta, "data_bytes": offset}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(data) < 12:
        raise DataError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + n:
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        header: dict[str, Any] = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header ({exc})") from None
    if header.get("version") != VERSION:
        raise DataError(f"{path}: checkpoint format version {header.get('version')!r}, "
                        f"this build reads version {VERSION}")
    body = data[12 + n:]
    if len(body) != header["data_bytes"]:
        raise DataError(f"{path}: truncated checkpoint body ({len(body)} of "
                        f"{header['data_bytes']} bytes)")
    arrays = {}
    for e in header["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(header["kind"], header["config"], arrays, header.get("meta", {}))


def load_parameters(module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``arrays`` into ``module``'s parameters in place.

    Every parameter must be present with the same shape.  A checkpoint array
    that names no parameter is an error too, so configs cannot silently
    drift apart.
    """
    named = dict(module.named_parameters())
    stored = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    unknown = sorted(set(stored) - set(named))
    if unknown:
        raise DataError(f"checkpoint has unknown parameter(s) {unknown[:5]}")
    for name, p in named.items():
        if name not in stored:
            raise DataError(f"checkpoint lacks parameter {name!r}")
        if stored[name].shape != p.data.shape:
            raise DataError(f"parameter {name!r}: checkpoint shape {stored[name].shape} "
                            f"!= model shape {p.data.shape}")
        p.data[...] = stored[name]
