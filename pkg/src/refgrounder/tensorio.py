"""Named-tensor container: JSON index header + raw little-endian payload.

Layout::

    b"RGTC" | uint32 header_len | header JSON (utf-8) | payload | sha256

The header carries the format version, a free-form ``meta`` dict, and one
index entry per tensor (name, dtype, shape, offset, nbytes).  The trailing
sha256 covers everything before it, so truncation or corruption anywhere is
detected on load.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"RGTC"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
    "bool": np.dtype("?"),
}
_NAMES = {v: k for k, v in _DTYPES.items()}


class ContainerError(Exception):
    pass


class ContainerFormatError(ContainerError):
    pass


class ContainerVersionError(ContainerError):
    pass


class ContainerChecksumError(ContainerError):
    pass


def _canonical_dtype(arr: np.ndarray) -> tuple[str, np.ndarray]:
    dt = arr.dtype.newbyteorder("<")
    if dt not in _NAMES:
        raise ContainerFormatError(f"unsupported dtype {arr.dtype}")
    # tobytes() emits C order for any layout; 0-d shapes must survive as-is
    return _NAMES[dt], arr.astype(dt, copy=False)


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        dtype_name, arr = _canonical_dtype(np.asarray(tensors[name]))
        raw = arr.tobytes()
        index.append({
            "name": name,
            "dtype": dtype_name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": index},
        sort_keys=True,
    ).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in (MAGIC, struct.pack("<I", len(header)), header, *blobs):
            fh.write(chunk)
            digest.update(chunk)
        fh.write(digest.digest())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"{path}: not a tensor container")
    body, stored = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != stored:
        raise ContainerChecksumError(f"{path}: checksum mismatch, file corrupted")
    (header_len,) = struct.unpack_from("<I", body, len(MAGIC))
    header_start = len(MAGIC) + 4
    try:
        header = json.loads(body[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise ContainerFormatError(f"{path}: bad header: {exc}") from exc
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise ContainerVersionError(
            f"{path}: container version {version}, reader supports {FORMAT_VERSION}"
        )
    payload = body[header_start + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ContainerFormatError(f"{path}: truncated tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, header.get("meta", {})
