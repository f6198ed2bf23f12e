"""Binary checkpoint files: a JSON header followed by raw float64 arrays.

Layout: magic ``SNPK``, uint32 little-endian header length, UTF-8 JSON header
(kind, spec, array table), then each array's float64 little-endian bytes in
table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"SNPK"


def save_checkpoint(path, kind, spec, arrays):
    """Write `arrays` (ordered mapping name -> 1-D float64 array) to `path`."""
    table = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8").ravel())
        table.append({"name": name, "size": int(arr.size)})
        blobs.append(arr.tobytes())
    header = json.dumps({"kind": kind, "spec": spec, "arrays": table}).encode("utf-8")
    payload = _MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_checkpoint(path):
    """Read a checkpoint; returns (kind, spec, dict name -> float64 array)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a snpekit checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    arrays = {}
    cursor = 8 + hlen
    for entry in header["arrays"]:
        n = entry["size"]
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=n, offset=cursor
        ).astype(np.float64)
        cursor += 8 * n
    return header["kind"], header["spec"], arrays
