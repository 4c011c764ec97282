"""Named-array checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the concatenated little-endian float32 array payloads. The header
carries the array directory plus arbitrary manifest metadata (model dims,
prefix strings, variant). Documented in docs/checkpoint.md.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IDEACKP1"


def save_arrays(path, arrays: dict, manifest: dict) -> Path:
    entries = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
        )
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = dict(manifest)
    header["format_version"] = 1
    header["arrays"] = entries
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)
    return path


def load_arrays(path) -> tuple:
    """Return (manifest dict without the array directory, name -> float32 array)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header.pop("arrays"):
        start, nbytes = entry["offset"], entry["nbytes"]
        buf = payload[start: start + nbytes]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
    return header, arrays
