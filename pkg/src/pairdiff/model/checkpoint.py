"""Checkpoint container.

Layout::

    PAIRDIFF-CKPT <format version>\\n
    <header byte length>\\n
    <header: one JSON document, sorted keys>\\n
    <payload: named arrays, raw little-endian, concatenated in header order>

The header lists every array (name, dtype, shape, offset, nbytes) and the
sha256 of the payload, so truncation or corruption is detected before any
state is built.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = "PAIRDIFF-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    full = dict(header)
    full["arrays"] = index
    full["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    text = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION}\n{len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(b"\n")
        fh.write(payload)
    tmp.replace(path)
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    try:
        first, rest = blob.split(b"\n", 1)
        magic, version = first.decode("ascii").split(" ")
        length_line, rest = rest.split(b"\n", 1)
        hlen = int(length_line)
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path} is not a checkpoint file") from None
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if int(version) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(rest) < hlen + 1:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    payload = rest[hlen + 1:]
    expected = sum(a["nbytes"] for a in header["arrays"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {expected} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for a in header["arrays"]:
        raw = payload[a["offset"]:a["offset"] + a["nbytes"]]
        dt = np.dtype(a["dtype"])
        arrays[a["name"]] = np.frombuffer(raw, dtype=dt).reshape(a["shape"]).astype(dt.newbyteorder("="))
    return header, arrays
