"""Binary checkpoint format.

Layout: magic `OCLDCKPT` (8 bytes) | format version u32 LE | header length
u64 LE | header JSON (ascii, sorted keys) | raw little-endian tensor data.
The header carries the config fingerprint and a tensor directory of
(name, dtype, shape, offset, nbytes) with offsets relative to the data
section. Writing is fully deterministic for identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"OCLDCKPT"
VERSION = 1


def save_checkpoint(path, tensors: dict, config_fingerprint: str) -> None:
    """Write named arrays (sorted by name) plus the config fingerprint."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str.lstrip("<=|"),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config_fingerprint": config_fingerprint, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return (tensors dict, config_fingerprint)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    header = json.loads(raw[20 : 20 + hlen].decode("ascii"))
    data = raw[20 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(
            data, dtype=dt, count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"],
        )
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["config_fingerprint"]
