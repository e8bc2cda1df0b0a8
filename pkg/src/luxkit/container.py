"""LXPF binary tensor container with a JSON manifest alongside.

Layout of ``<name>.lxpf`` (all integers little-endian)::

    b"LXPF"  u32 version  u32 n_tensors
    repeated n_tensors times:
        u32 dtype (0 = f32, 1 = f16)  u32 rank  u64 dims[rank]  payload

``<name>.json`` lists each tensor's name, header offset, payload offset,
shape and dtype, plus free-form metadata.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"LXPF"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
DTYPE_CODES = {"float32": 0, "float16": 1}


class ContainerError(ValueError):
    pass


def container_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".lxpf", ".json"):
        path = path.with_suffix("")
    return path.with_suffix(".lxpf"), path.with_suffix(".json")


def _atomic_write(target: Path, data: bytes) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack_tensors(tensors: dict[str, np.ndarray], dtype: str = "float32") -> tuple[bytes, list[dict]]:
    if dtype not in DTYPE_CODES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    code = DTYPE_CODES[dtype]
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    offset = 12
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=DTYPES[code], order="C")
        header = struct.pack("<II", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload = arr.tobytes()
        entries.append({
            "name": name,
            "offset": offset,
            "payload_offset": offset + len(header),
            "shape": list(arr.shape),
            "dtype": dtype,
        })
        parts += [header, payload]
        offset += len(header) + len(payload)
    return b"".join(parts), entries


def unpack_tensors(data: bytes) -> list[tuple[int, int, np.ndarray]]:
    """Parse a container body into ``[(offset, payload_offset, array), ...]``."""
    if len(data) < 12 or data[:4] != MAGIC:
        raise ContainerError("bad magic: not an LXPF container")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    out = []
    for i in range(count):
        start = pos
        if pos + 8 > len(data):
            raise ContainerError(f"truncated header for tensor {i}")
        code, rank = struct.unpack_from("<II", data, pos)
        if code not in DTYPES:
            raise ContainerError(f"unknown dtype code {code} for tensor {i}")
        pos += 8
        if pos + 8 * rank > len(data):
            raise ContainerError(f"truncated header for tensor {i}")
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        dt = DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = n * dt.itemsize
        if pos + nbytes > len(data):
            raise ContainerError(f"truncated payload for tensor {i}")
        arr = np.frombuffer(data, dt, n, pos).reshape(dims).copy()
        out.append((start, pos, arr))
        pos += nbytes
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None,
                  dtype: str = "float32") -> tuple[Path, Path]:
    """Write ``tensors`` (insertion order kept) and their manifest atomically."""
    body_path, manifest_path = container_paths(path)
    body, entries = pack_tensors(tensors, dtype)
    manifest = {"format": "LXPF", "version": VERSION, "tensors": entries, "meta": meta or {}}
    _atomic_write(body_path, body)
    _atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True).encode())
    return body_path, manifest_path


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    body_path, manifest_path = container_paths(path)
    manifest = json.loads(manifest_path.read_text())
    parsed = unpack_tensors(body_path.read_bytes())
    entries = manifest.get("tensors", [])
    if len(entries) != len(parsed):
        raise ContainerError(f"manifest lists {len(entries)} tensors, payload has {len(parsed)}")
    tensors = {}
    for e, (off, poff, arr) in zip(entries, parsed):
        if (e["offset"] != off or e["payload_offset"] != poff or list(arr.shape) != e["shape"]
                or DTYPES[DTYPE_CODES[e["dtype"]]] != arr.dtype):
            raise ContainerError(f"manifest/payload disagreement for tensor {e['name']!r}")
        tensors[e["name"]] = arr
    return tensors, manifest.get("meta", {})
