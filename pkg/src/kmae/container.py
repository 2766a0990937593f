"""The ``KMAE`` binary container.

Layout (all integers little-endian)::

    magic            4 bytes   b"KMAE"
    version          u32       1
    manifest_length  u64       byte length of the manifest
    manifest         UTF-8 JSON {"arrays": [{"name", "dtype", "shape"}], "meta": {...}}
    payload          arrays in manifest order, row-major, little-endian

``dtype`` is one of f32, f64, c64 (interleaved real/imag f32 pairs), u8.
The manifest is serialized with sorted keys and no whitespace, so reading a
file and writing it back reproduces the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"KMAE"
VERSION = 1

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "c64": np.dtype("<c8"),
    "u8": np.dtype("u1"),
}


class ContainerError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> str:
    kind, size = arr.dtype.kind, arr.dtype.itemsize
    if kind == "f" and size == 4:
        return "f32"
    if kind == "f" and size == 8:
        return "f64"
    if kind == "c":
        return "c64"
    if kind in "ub" and size == 1:
        return "u8"
    raise ContainerError(f"unsupported array dtype {arr.dtype}")


def encode_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def to_bytes(arrays: dict, meta: dict | None = None) -> bytes:
    entries, chunks = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        entries.append({"name": name, "dtype": code, "shape": [int(s) for s in arr.shape]})
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    manifest = encode_manifest({"arrays": entries, "meta": meta or {}})
    header = MAGIC + struct.pack("<IQ", VERSION, len(manifest))
    return header + manifest + b"".join(chunks)


def from_bytes(buf: bytes) -> tuple[dict, dict]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise ContainerError("not a KMAE container (bad magic)")
    version, mlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = 16
    if start + mlen > len(buf):
        raise ContainerError("truncated manifest")
    manifest = json.loads(buf[start : start + mlen].decode("utf-8"))
    offset = start + mlen
    arrays = {}
    for entry in manifest["arrays"]:
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise ContainerError(f"unknown dtype code {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(buf):
            raise ContainerError(f"truncated payload in array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(buf):
        raise ContainerError(f"{len(buf) - offset} trailing bytes after payload")
    return arrays, manifest.get("meta", {})


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"output directory does not exist: {directory}")
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, arrays: dict, meta: dict | None = None):
    atomic_write_bytes(path, to_bytes(arrays, meta))


def read(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
