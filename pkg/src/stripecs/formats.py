"""Binary containers: training checkpoints ("RTCK") and measurement bitstreams ("RTCZ").

All integers and floats are little-endian.

Checkpoint::

    "RTCK" | version u32 | config hash (32 bytes) | entry count u32
    entries: name length u16 | name utf-8 | dtype u8 | ndim u8 | dims u32 * ndim | payload

Bitstream::

    "RTCZ" | version u32 | B, H_s, W_s u32 | stripe count u32 | native_scale f64
    stripes: index u32 | b, h, w u32 | dtype u8 (0 = f32, 1 = i8) | [scale f64 if i8] | payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .encoder import CompressedStripe

CKPT_MAGIC = b"RTCK"
CKPT_VERSION = 1
STREAM_MAGIC = b"RTCZ"
STREAM_VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("i1"),
    3: np.dtype("u1"),
    4: np.dtype("<i8"),
}


class FormatError(ValueError):
    """Malformed, truncated or incompatible container."""


class _Reader:
    def __init__(self, raw: bytes, what: str):
        self.raw, self.pos, self.what = raw, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"{self.what}: truncated at byte {self.pos}, needed {n} more of {len(self.raw)}"
            )
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def done(self) -> None:
        if self.pos != len(self.raw):
            raise FormatError(f"{self.what}: {len(self.raw) - self.pos} trailing bytes")


# --- checkpoints ---------------------------------------------------------------------


@dataclass
class Checkpoint:
    config_hash: bytes
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.config_hash) != 32:
            raise ValueError("config hash must be 32 bytes")

    def to_bytes(self) -> bytes:
        parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), self.config_hash,
                 struct.pack("<I", len(self.entries))]
        for name, arr in self.entries.items():
            arr = np.asarray(arr)
            code = next((c for c, dt in _DTYPES.items() if dt == arr.dtype.newbyteorder("<")), None)
            if code is None:
                raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
            key = _DTYPES[code]
            enc = name.encode("utf-8")
            parts.append(struct.pack("<H", len(enc)) + enc)
            parts.append(struct.pack("<BB", code, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=key).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes, what: str = "checkpoint") -> "Checkpoint":
        r = _Reader(raw, what)
        magic = r.take(4) if len(raw) >= 4 else raw
        if magic != CKPT_MAGIC:
            raise FormatError(f"{what}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        (version,) = r.unpack("I")
        if version != CKPT_VERSION:
            raise FormatError(f"{what}: unsupported version {version}, expected {CKPT_VERSION}")
        chash = r.take(32)
        (count,) = r.unpack("I")
        entries = {}
        for _ in range(count):
            (n,) = r.unpack("H")
            name = r.take(n).decode("utf-8")
            code, ndim = r.unpack("BB")
            if code not in _DTYPES:
                raise FormatError(f"{what}: entry {name!r} has unknown dtype code {code}")
            dims = r.unpack(f"{ndim}I") if ndim else ()
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            entries[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).copy()
        r.done()
        return cls(chash, entries)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), str(path))


# --- bitstreams ----------------------------------------------------------------------

_STREAM_HEADER = struct.Struct("<IIIId")
_STRIPE_HEADER = struct.Struct("<IIIIB")


@dataclass
class Bitstream:
    source: tuple[int, int, int]  # (B, H_s, W_s) of every stripe
    native_scale: float
    stripes: list[CompressedStripe]

    def to_bytes(self) -> bytes:
        B, H, W = self.source
        parts = [STREAM_MAGIC, struct.pack("<I", STREAM_VERSION),
                 _STREAM_HEADER.pack(B, H, W, len(self.stripes), self.native_scale)]
        for s in self.stripes:
            if tuple(s.source) != tuple(self.source):
                raise FormatError(f"stripe {s.index} has source {s.source}, stream is {self.source}")
            b, h, w = s.shape
            i8 = s.dtype == "i8"
            parts.append(_STRIPE_HEADER.pack(s.index, b, h, w, 1 if i8 else 0))
            if i8:
                parts.append(struct.pack("<d", s.scale))
                parts.append(np.ascontiguousarray(s.data, dtype=np.int8).tobytes())
            else:
                parts.append(np.ascontiguousarray(s.data, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes, what: str = "bitstream") -> "Bitstream":
        r = _Reader(raw, what)
        magic = r.take(4) if len(raw) >= 4 else raw
        if magic != STREAM_MAGIC:
            raise FormatError(f"{what}: bad magic {magic!r}, expected {STREAM_MAGIC!r}")
        (version,) = r.unpack("I")
        if version != STREAM_VERSION:
            raise FormatError(f"{what}: unsupported version {version}, expected {STREAM_VERSION}")
        B, H, W, count, scale = r.unpack("IIIId")
        stripes = []
        for _ in range(count):
            index, b, h, w, code = r.unpack("IIIIB")
            if code == 1:
                (qscale,) = r.unpack("d")
                data = np.frombuffer(r.take(b * h * w), dtype=np.int8).reshape(b, h, w).copy()
                stripes.append(CompressedStripe(data, "i8", (B, H, W), qscale, index))
            elif code == 0:
                data = np.frombuffer(r.take(4 * b * h * w), dtype="<f4").reshape(b, h, w)
                stripes.append(CompressedStripe(data.astype(np.float32), "f32", (B, H, W), index=index))
            else:
                raise FormatError(f"{what}: stripe {index} has unknown dtype code {code}")
        r.done()
        return cls((B, H, W), scale, stripes)

    def payload_bytes(self) -> int:
        return sum(s.nbytes for s in self.stripes)


def save_bitstream(stream: Bitstream, path) -> None:
    Path(path).write_bytes(stream.to_bytes())


def load_bitstream(path) -> Bitstream:
    return Bitstream.from_bytes(Path(path).read_bytes(), str(path))


def entries_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    """Bit-level equality of two entry maps."""
    return a.keys() == b.keys() and all(
        a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
        for k in a
    )
