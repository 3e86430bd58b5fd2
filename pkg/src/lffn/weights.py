"""Named parameter container and its binary file format.

Layout (all little-endian)::

    b"LFFN"  u32 version  u32 count
    count x { u16 name_len, name (utf-8), u8 rank, rank x u32 extent,
              float32 payload (row-major) }
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from lffn.tensor import ShapeError, Tensor

MAGIC = b"LFFN"
VERSION = 1


class FormatError(ValueError):
    pass


class WeightStore(OrderedDict):
    """Ordered ``name -> Tensor`` map.

    A store built from a network shares tensors with it, so in-place
    updates (initialisation, optimiser steps, :meth:`load_into`) act on
    the live model.
    """

    def num_elements(self) -> int:
        return sum(t.size for t in self.values())

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<II", VERSION, len(self))]
        for name, t in self.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<B", t.ndim))
            chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
            chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WeightStore":
        if buf[:4] != MAGIC:
            raise FormatError("not an LFFN weight container (bad magic)")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        off = 12
        store = cls()
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", buf, off)
                off += 2
                name = buf[off:off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<B", buf, off)
                off += 1
                shape = struct.unpack_from(f"<{rank}I", buf, off)
                off += 4 * rank
                n = int(np.prod(shape, dtype=np.int64))
                if off + 4 * n > len(buf):
                    raise FormatError(f"truncated payload for {name!r}")
                data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
                off += 4 * n
                store[name] = Tensor(data.astype(np.float32), name=name)
        except struct.error as exc:
            raise FormatError(f"truncated container: {exc}") from None
        if off != len(buf):
            raise FormatError(f"{len(buf) - off} trailing bytes after last entry")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        return cls.from_bytes(Path(path).read_bytes())

    def load_into(self, target: "WeightStore") -> None:
        """Copy values into ``target`` (e.g. ``net.store``); names and shapes must match."""
        missing = set(target) ^ set(self)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)[:5]}")
        for name, t in target.items():
            src = self[name]
            if src.shape != t.shape:
                raise ShapeError(f"{name}: stored {src.shape}, model expects {t.shape}")
            t.data[...] = src.data
