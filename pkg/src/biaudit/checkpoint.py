"""Bit-exact checkpoint files shared by the pre-training simulator and the
fine-tuned models.

Layout: [16-byte magic][u32 header length][UTF-8 JSON header][float64
little-endian payload].  The header records kind, config, seed, step, and
the name/shape/offset of every parameter; reloading reproduces each array
bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .gradkit import Parameter

__all__ = ["CHECKPOINT_MAGIC", "load_checkpoint", "save_checkpoint"]

CHECKPOINT_MAGIC = b"BIAUDIT-CKP" + b"\x00" * 5


def save_checkpoint(path, kind: str, config: dict, seed: int, step: int, params: dict[str, Parameter]) -> None:
    names = sorted(params)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "frozen": bool(params[name].frozen)}
        )
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"kind": kind, "config": config, "seed": int(seed), "step": int(step), "params": entries}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, Parameter]]:
    """Returns (header, parameters); parameter arrays are bit-identical to
    what was saved."""
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"format error at byte 0: bad magic {blob[:16]!r}")
    (header_len,) = struct.unpack_from("<I", blob, len(CHECKPOINT_MAGIC))
    header_at = len(CHECKPOINT_MAGIC) + 4
    if header_at + header_len > len(blob):
        raise ValueError("truncation error: header exceeds file")
    try:
        header = json.loads(blob[header_at : header_at + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"format error at byte {header_at}: unreadable header ({e})") from None
    payload_at = header_at + header_len
    params: dict[str, Parameter] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = payload_at + entry["offset"] + 8 * count
        if end > len(blob):
            raise ValueError(f"truncation error: parameter {entry['name']!r} exceeds file")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=payload_at + entry["offset"]).reshape(shape)
        params[entry["name"]] = Parameter(arr.copy(), frozen=bool(entry.get("frozen", False)))
    return header, params
