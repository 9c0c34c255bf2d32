"""Binary container used for every on-disk artifact.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
then raw little-endian array payloads.  The header carries a ``sections``
mapping ``section -> {name: {"dtype", "shape", "offset"}}`` with offsets
relative to the start of the payload.  Arrays are written in section order
and, within a section, sorted by name, so identical inputs give identical
bytes.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SDISTIL1"
_DTYPES = {"f32": "<f4", "u32": "<u4", "f64": "<f8"}


def _dtype_tag(arr):
    if arr.dtype.kind == "f":
        return "f32"
    if arr.dtype.kind in "ui":
        return "u32"
    raise FormatError(f"cannot store dtype {arr.dtype}")


def dumps(header, sections):
    """Serialise ``header`` plus ``sections`` ({section: {name: array}})."""
    header = dict(header)
    directory = {}
    chunks = []
    offset = 0
    for section in sections:
        entries = {}
        for name in sorted(sections[section]):
            arr = np.asarray(sections[section][name])
            tag = _dtype_tag(arr)
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
            entries[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset}
            chunks.append(raw)
            offset += len(raw)
        directory[section] = entries
    header["sections"] = directory
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def loads(data):
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError("not a selfdistill container")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt container header: {exc}") from None
    payload = memoryview(data)[16 + n :]
    sections = {}
    for section, entries in header.get("sections", {}).items():
        arrays = {}
        for name, meta in entries.items():
            dt = np.dtype(_DTYPES[meta["dtype"]])
            count = int(np.prod(meta["shape"], dtype=np.int64))
            start = meta["offset"]
            chunk = payload[start : start + count * dt.itemsize]
            if len(chunk) != count * dt.itemsize:
                raise FormatError(f"truncated payload for {section}/{name}")
            arr = np.frombuffer(chunk, dtype=dt)
            arrays[name] = arr.reshape(meta["shape"]).copy()
        sections[section] = arrays
    return header, sections


def save(path, header, sections):
    data = dumps(header, sections)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
