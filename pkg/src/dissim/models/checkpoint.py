"""Checkpoint container: magic, version, JSON header, float32 payloads.

Layout:

    bytes 0-3    magic "DSCK"
    bytes 4-5    major version, uint16 LE
    bytes 6-7    minor version, uint16 LE
    bytes 8-11   header length N, uint32 LE
    bytes 12-..  N bytes of UTF-8 JSON: {"kind", "config", "arrays": [{"name", "shape"}]}
    then         payloads, float32 little-endian, C order, in header order

Readers accept any minor version under the same major and ignore unknown
header keys, so the format is forward/backward compatible within a major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

__all__ = ["CheckpointData", "save_checkpoint", "load_checkpoint", "MAGIC", "MAJOR", "MINOR"]

MAGIC = b"DSCK"
MAJOR = 1
MINOR = 0


@dataclass
class CheckpointData:
    kind: str
    config: dict
    arrays: dict[str, np.ndarray]


def save_checkpoint(path: Path, kind: str, config: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    names = list(arrays.keys())
    header = {
        "kind": kind,
        "config": config,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HHI", MAJOR, MINOR, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return path


def load_checkpoint(path: Path) -> CheckpointData:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    major, minor, header_len = struct.unpack("<HHI", raw[4:12])
    if major != MAJOR:
        raise CheckpointError(f"{path}: unsupported checkpoint major version {major} (have {MAJOR})")
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    for key in ("kind", "config", "arrays"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    offset = 12 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at array {entry['name']!r}")
        flat = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[entry["name"]] = flat.reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payloads")
    return CheckpointData(kind=header["kind"], config=header["config"], arrays=arrays)
