"""Checkpoint container: versioned header + named float32 tensor table.

Layout: magic b"HXCK", u32 version, u64 header length, UTF-8 JSON header,
then the concatenated little-endian float32 payloads.  The header carries
the config echo, epoch counter, RNG stream states, scalar extras, and the
tensor directory (name, shape, element offset).  Reload restores training
bit-for-bit on the same machine.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"HXCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    version: int
    config_text: str
    epoch: int
    tensors: dict[str, np.ndarray]
    rng_state: dict
    extra: dict


def save_checkpoint(path, config_text: str, epoch: int, tensors: dict[str, np.ndarray],
                    rng_state: dict, extra: dict | None = None) -> None:
    directory = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    header = {
        "version": VERSION,
        "config": config_text,
        "epoch": int(epoch),
        "rng": rng_state,
        "extra": extra or {},
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise DataFormatError("truncated checkpoint prefix", offset=len(raw))
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise DataFormatError("truncated checkpoint header", offset=len(raw))
    try:
        header = json.loads(raw[_PREFIX.size : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt checkpoint header: {exc}", offset=_PREFIX.size) from exc
    tensors: dict[str, np.ndarray] = {}
    payload = np.frombuffer(raw, dtype="<f4", offset=header_end)
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > payload.size:
            raise DataFormatError(
                f"tensor {entry['name']!r} overruns payload",
                offset=header_end + 4 * start,
            )
        tensors[entry["name"]] = payload[start : start + size].reshape(shape).copy()
    return Checkpoint(
        version=version,
        config_text=header["config"],
        epoch=header["epoch"],
        tensors=tensors,
        rng_state=header["rng"],
        extra=header.get("extra", {}),
    )
