"""NTC tensor container: JSON header + raw little-endian payloads.

Layout: 4-byte magic b"NTC1", uint64-LE header length, UTF-8 JSON header,
then the concatenated array payloads. The header maps array names to
{shape, dtype, byte_offset} (offsets relative to the payload start) and may
carry an arbitrary JSON `meta` blob. Writes are byte-deterministic: names
are sorted and the JSON is dumped with sorted keys.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NTC1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("<u1"),
    "i64": np.dtype("<i8"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def _dtype_name(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    name = _DTYPE_NAMES.get(dt)
    if name is None:
        raise ValueError(f"NTC: unsupported dtype {arr.dtype}")
    return name


def write_ntc(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays (and an optional JSON meta blob) to `path`."""
    names = sorted(arrays)
    entries = {}
    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        dt = _dtype_name(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": dt, "byte_offset": offset}
        payloads.append(raw)
        offset += len(raw)
    header = {"tensors": entries}
    if meta is not None:
        header["meta"] = meta
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for raw in payloads:
            f.write(raw)


def read_ntc(path) -> tuple[dict, dict]:
    """Read an NTC file; returns (arrays, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not an NTC container (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for name, ent in header["tensors"].items():
        dt = _DTYPES[ent["dtype"]]
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = ent["byte_offset"]
        arr = np.frombuffer(payload, dtype=dt, count=n, offset=start).reshape(shape)
        arrays[name] = arr.copy()
    return arrays, header.get("meta", {})
