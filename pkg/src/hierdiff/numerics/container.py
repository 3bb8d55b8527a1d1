"""Self-describing binary container for named arrays.

Layout::

    <magic>\\n
    uint64 little-endian: length of the JSON header in bytes
    JSON header: {"meta": {...}, "arrays": [{name, dtype, shape, offset}, ...]}
    raw little-endian array payloads, back to back

The writer is byte-deterministic: same inputs give identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = "HIERDIFF-CKPT-1"


class ContainerError(ValueError):
    pass


def write_container(path, magic: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        buf = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset})
        payloads.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(magic.encode() + b"\n")
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in payloads:
            fh.write(buf)


def read_container(path, magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    head = magic.encode() + b"\n"
    if not raw.startswith(head):
        found = raw[: len(head)].split(b"\n")[0].decode(errors="replace")
        raise ContainerError(f"{path}: expected header {magic!r}, found {found!r}")
    pos = len(head)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return header["meta"], arrays


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write named parameters (Tensors or arrays) as float64 under the checkpoint magic."""
    arrays = {k: np.asarray(getattr(v, "data", v), dtype=np.float64) for k, v in params.items()}
    write_container(path, CKPT_MAGIC, arrays, meta)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return read_container(path, CKPT_MAGIC)
