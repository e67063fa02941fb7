"""Binary container for named float arrays plus a JSON metadata block.

Layout (little-endian throughout):

    bytes 0..5    magic  b"TQPK1\\n"
    bytes 6..9    uint32 header length N
    bytes 10..    N bytes of UTF-8 JSON:
                    {"version": 1,
                     "meta": {...},
                     "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload       raw C-order array bytes, offsets relative to payload start

Writes are deterministic (sorted keys, no timestamps), so identical inputs
produce bitwise-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"TQPK1\n"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Malformed, truncated or incompatible container file."""


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays and metadata to `path`.

    Arrays are stored in sorted name order as contiguous little-endian
    buffers; `meta` must be JSON-serializable.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path):
    """Read a container written by `save_arrays`.

    Returns (arrays: dict[str, ndarray], meta: dict). Raises ContainerError
    on a bad magic, unsupported version, corrupt header or truncated payload.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"not a TQPK container: {path}")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise ContainerError(f"truncated header length field: {path}")
    (hlen,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    if len(raw) < pos + hlen:
        raise ContainerError(f"truncated header: {path}")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header in {path}: {exc}") from exc
    if not isinstance(header, dict) or "version" not in header:
        raise ContainerError(f"corrupt header in {path}: missing version")
    if header["version"] != FORMAT_VERSION:
        raise ContainerError(
            f"incompatible container version {header['version']} "
            f"(expected {FORMAT_VERSION}): {path}"
        )
    payload = raw[pos + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ContainerError(f"truncated payload for '{entry['name']}': {path}")
        arr = np.frombuffer(
            payload, dtype=np.dtype(entry["dtype"]), count=nbytes // np.dtype(entry["dtype"]).itemsize,
            offset=start,
        ).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return arrays, header.get("meta", {})
