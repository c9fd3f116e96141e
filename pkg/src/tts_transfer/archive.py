"""Versioned binary parameter archives ("TTSF").

Layout, all integers little-endian::

    b"TTSF" | u32 version | u32 n | n bytes of UTF-8 JSON metadata
    u32 tensor count
    per tensor: u32 name length | name (UTF-8) | u8 dtype code | u8 rank
                | rank x u32 extents | payload (little-endian, C order)

Metadata is serialised with sorted keys and fixed separators, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TTSF"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4"), 4: np.dtype("<i8"), 5: np.dtype("u1")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class ArchiveFormatError(ValueError):
    """The bytes are not a well-formed archive."""


def _le(dt: np.dtype) -> np.dtype:
    return dt.newbyteorder("<") if dt.itemsize > 1 else dt


def _dump_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


@dataclass
class ParameterArchive:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name, arr in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise ValueError("tensor names must be non-empty strings")
            a = np.asarray(arr)
            if _le(a.dtype) not in _CODES:
                raise ValueError(f"{name}: unsupported dtype {a.dtype}")
            clean[name] = a
        self.tensors = clean

    # -- views ----------------------------------------------------------------------
    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def frozen(self) -> frozenset[str]:
        return frozenset(self.metadata.get("frozen", ()))

    def trainable(self, name: str) -> bool:
        if name not in self.tensors:
            raise KeyError(name)
        return name not in self.frozen and name not in self.metadata.get("buffers", ())

    @property
    def fingerprint(self) -> str:
        """Digest of names, dtypes, shapes and values; metadata is not included."""
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            a = np.ascontiguousarray(arr, dtype=_le(arr.dtype))
            h.update(name.encode("utf-8") + b"\0" + a.dtype.str.encode() + repr(a.shape).encode() + a.tobytes())
        return h.hexdigest()[:16]

    def copy(self, metadata: dict | None = None) -> "ParameterArchive":
        meta = json.loads(_dump_json(self.metadata)) if metadata is None else metadata
        return ParameterArchive({k: v.copy() for k, v in self.tensors.items()}, meta)

    # -- encoding ---------------------------------------------------------------------
    def to_bytes(self) -> bytes:
        meta = _dump_json(self.metadata)
        parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            dt = _le(arr.dtype)
            raw_name = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw_name)) + raw_name)
            parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes, where: str = "<bytes>") -> "ParameterArchive":
        pos = 0

        def take(n: int, what: str) -> bytes:
            nonlocal pos
            if pos + n > len(raw):
                raise ArchiveFormatError(f"{where}: truncated while reading {what} at byte {pos} (need {n}, have {len(raw) - pos})")
            out = raw[pos : pos + n]
            pos += n
            return out

        magic = take(4, "magic")
        if magic != MAGIC:
            raise ArchiveFormatError(f"{where}: bad magic {magic!r}, expected {MAGIC!r}")
        version, meta_len = struct.unpack("<II", take(8, "header"))
        if version != VERSION:
            raise ArchiveFormatError(f"{where}: unsupported archive version {version}")
        try:
            metadata = json.loads(take(meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArchiveFormatError(f"{where}: metadata block is not UTF-8 JSON ({exc})") from exc
        if not isinstance(metadata, dict):
            raise ArchiveFormatError(f"{where}: metadata must be a JSON object")
        (count,) = struct.unpack("<I", take(4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for i in range(count):
            (n,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
            try:
                name = take(n, f"name of tensor {i}").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ArchiveFormatError(f"{where}: tensor {i} name is not UTF-8") from exc
            code, rank = struct.unpack("<BB", take(2, f"dtype/rank of {name!r}"))
            if code not in _DTYPES:
                raise ArchiveFormatError(f"{where}: tensor {name!r} has unknown dtype code {code}")
            shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            payload = take(nbytes, f"payload of {name!r}")
            if name in tensors:
                raise ArchiveFormatError(f"{where}: duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
        if pos != len(raw):
            raise ArchiveFormatError(f"{where}: {len(raw) - pos} trailing bytes after the last tensor")
        return cls(tensors, metadata)

    def save(self, path) -> None:
        """Atomic write: temp file in the target directory, then rename over ``path``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_bytes()
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "ParameterArchive":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ArchiveFormatError(f"{path}: {exc}") from exc
        return cls.from_bytes(raw, str(path))
