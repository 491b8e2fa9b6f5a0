"""Binary container shared by dataset and checkpoint files.

Layout::

    magic   b"DYNID\\0"            6 bytes
    version uint32 little-endian
    hlen    uint64 little-endian   length of the JSON header
    header  UTF-8 JSON             metadata + block table
    data    concatenated blocks    float64 little-endian, or packed bits

Each block table entry carries ``name``, ``dtype`` ("f8" or "bits"),
``shape``, ``offset`` (relative to the data section) and ``nbytes``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DYNID\x00"
VERSION = 1


class ContainerError(ValueError):
    """Malformed, truncated or incompatible container file."""


def write_container(path, kind: str, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    table = []
    payload = []
    offset = 0
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype == np.bool_:
            raw = np.packbits(arr.reshape(-1), bitorder="little").tobytes()
            dtype = "bits"
        else:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            dtype = "f8"
        table.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "blocks": table}, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)


def read_container(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    prefix = len(MAGIC) + 12
    if len(data) < prefix or data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: not a dynid container (bad magic)")
    (version,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    if version != VERSION:
        raise ContainerError(f"{path}: version mismatch (file {version}, supported {VERSION})")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) + 4 : prefix])
    if prefix + hlen > len(data):
        raise ContainerError(f"{path}: truncated header section")
    try:
        header = json.loads(data[prefix : prefix + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ContainerError(f"{path}: malformed header section: {err}") from None
    if header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} file, found {header.get('kind')!r}")
    body = data[prefix + hlen :]
    blocks = {}
    for entry in header["blocks"]:
        name, shape = entry["name"], tuple(entry["shape"])
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise ContainerError(f"{path}: truncated {name!r} section")
        raw = body[start : start + n]
        count = int(np.prod(shape)) if shape else 1
        if entry["dtype"] == "bits":
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
            if bits.size < count:
                raise ContainerError(f"{path}: truncated {name!r} section")
            blocks[name] = bits[:count].astype(bool).reshape(shape)
        elif entry["dtype"] == "f8":
            if n != 8 * count:
                raise ContainerError(f"{path}: {name!r} section size does not match its shape")
            blocks[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        else:
            raise ContainerError(f"{path}: unknown dtype {entry['dtype']!r} in {name!r} section")
    return header["meta"], blocks
