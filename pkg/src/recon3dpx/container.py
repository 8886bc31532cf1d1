"""PXT1 tensor container.

Layout (little-endian)::

    b"PXT1" | u32 version | u32 tensor count
    index table, per tensor: u16 name length, name, u8 dtype code,
        u8 ndim, ndim * u32 dims, u64 payload offset, u64 payload bytes
    payloads (offsets are from the start of the file)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PXT1"
VERSION = 1
_F32 = 1


class ContainerError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    arrays = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in tensors.items()}
    entries = []
    for name, arr in arrays.items():
        raw = name.encode()
        entries.append((raw, arr))
    header_len = 12 + sum(2 + len(raw) + 2 + 4 * arr.ndim + 16 for raw, arr in entries)
    index = []
    offset = header_len
    for raw, arr in entries:
        index.append(struct.pack("<H", len(raw)) + raw)
        index.append(struct.pack("<BB", _F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        index.append(struct.pack("<QQ", offset, arr.nbytes))
        offset += arr.nbytes
    head = MAGIC + struct.pack("<II", VERSION, len(entries)) + b"".join(index)
    return head + b"".join(arr.tobytes() for _, arr in entries)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ContainerError("not a PXT1 container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported PXT1 version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode()
        pos += ln
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code != _F32:
            raise ContainerError(f"{name}: unsupported dtype code {code}")
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        n = int(np.prod(shape))
        if nbytes != 4 * n or offset + nbytes > len(buf):
            raise ContainerError(f"{name}: payload size/offset inconsistent")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
    return out


def write(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
