"""Single-file persistence: JSON header + raw little-endian array payload.

Layout: u32 header length | UTF-8 JSON | concatenated array bytes. The
header carries array descriptors (name, dtype, shape, offset) plus a
SHA-256 checksum of the payload, verified on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from tokenrank.errors import CorruptionError, FormatError

_LEN = struct.Struct("<I")

_DTYPES = {"<f4": "<f4", "<f2": "<f2", "|i1": "|i1", "|u1": "|u1", "<i8": "<i8"}


def _dtype_code(arr: np.ndarray) -> str:
    code = arr.dtype.str
    if code not in _DTYPES:
        raise FormatError(f"unsupported array dtype {arr.dtype}")
    return code


def write_container(path: str | Path, header: Mapping, arrays: Mapping[str, np.ndarray]) -> int:
    descriptors = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        descriptors.append({
            "name": name,
            "dtype": _dtype_code(arr),
            "shape": list(arr.shape),
            "offset": len(payload),
        })
        payload.extend(arr.tobytes())
    digest = hashlib.sha256(bytes(payload)).hexdigest()
    doc = dict(header)
    doc["arrays"] = descriptors
    doc["checksum"] = digest
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))
        return fh.tell()


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw_len = fh.read(_LEN.size)
        if len(raw_len) != _LEN.size:
            raise CorruptionError(f"{path}: missing header length")
        (hlen,) = _LEN.unpack(raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise CorruptionError(f"{path}: truncated header")
        try:
            doc = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: invalid header ({exc})") from None
        payload = fh.read()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != doc.get("checksum"):
        raise CorruptionError(f"{path}: checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    for desc in doc.get("arrays", []):
        dtype = np.dtype(desc["dtype"])
        shape = tuple(desc["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = desc["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise CorruptionError(f"{path}: array {desc['name']} exceeds payload")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start).reshape(shape)
        arrays[desc["name"]] = arr
    header = {k: v for k, v in doc.items() if k not in ("arrays", "checksum")}
    return header, arrays
