"""Checkpoint container and its binary file format.

Layout, all little-endian::

    b"PFVC" | u32 version | u32 hash_len | hash (utf-8)
    repeated: u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | raw values
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PFVC"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<i4"), 4: np.dtype("u1")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    records: dict[str, np.ndarray] = field(default_factory=dict)
    config_hash: str = ""
    version: int = VERSION

    def __getitem__(self, name: str) -> np.ndarray:
        return self.records[name]

    def __contains__(self, name: str) -> bool:
        return name in self.records

    def add(self, name: str, value) -> None:
        if name in self.records:
            raise KeyError(f"duplicate checkpoint record {name!r}")
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        self.records[name] = np.array(value, copy=True)

    def add_module(self, prefix: str, module: torch.nn.Module) -> None:
        for name, t in module.state_dict().items():
            self.add(f"{prefix}.{name}", t)

    def load_module(self, prefix: str, module: torch.nn.Module) -> None:
        state = {}
        for name, ref in module.state_dict().items():
            key = f"{prefix}.{name}"
            if key not in self.records:
                raise CheckpointError(f"checkpoint is missing record {key!r}")
            state[name] = torch.from_numpy(np.array(self.records[key])).to(ref.dtype)
        module.load_state_dict(state)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.records.items() if k.startswith(p)}


def _canonical(value: np.ndarray) -> np.ndarray:
    if value.dtype == np.bool_:
        return value.astype("u1")
    for dt in _TAGS:
        if value.dtype == dt or value.dtype.newbyteorder("<") == dt:
            return value.astype(dt, copy=False)
    if np.issubdtype(value.dtype, np.floating):
        return value.astype("<f8")
    if np.issubdtype(value.dtype, np.integer):
        return value.astype("<i8")
    raise CheckpointError(f"unsupported dtype {value.dtype}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    h = ckpt.config_hash.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(h)), h]
    for name, value in ckpt.records.items():
        arr = _canonical(np.asarray(value))
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(buf: bytes, expected_hash: str | None = None, source: str = "checkpoint") -> Checkpoint:
    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic bytes, not a checkpoint")
    if len(buf) < 16:
        raise CheckpointError(f"{source}: checksum failure (file truncated)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: checksum failure (file truncated or corrupted)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12
    config_hash = body[pos : pos + hlen].decode("utf-8")
    pos += hlen
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError(
            f"{source}: config hash {config_hash!r} does not match the current configuration {expected_hash!r}; "
            "retrain this stage or restore the matching config"
        )
    records = {}
    while pos < len(body):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        tag, rank = struct.unpack_from("<BI", body, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        dt = _DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(body, dtype=dt, count=count, offset=pos).reshape(dims).copy()
        pos += count * dt.itemsize
        records[name] = arr
    return Checkpoint(records, config_hash, version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_hash, source=str(path))
