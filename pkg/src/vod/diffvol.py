"""Difference volumes (CFD, SSFF, RAW) and the binary shard cache."""

from __future__ import annotations

import enum
import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptShard, IndexOutOfRange, TooShort, VersionMismatch
from .segmenter import FaceSegment, SegmentSpec

SHARD_MAGIC = b"VODS"
SHARD_VERSION = 1


class Mode(enum.IntEnum):
    CFD = 0
    SSFF = 1
    RAW = 2

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        return cls[str(value).upper()]


LABEL_CODES = {"real": 0, "fake": 1}
LABEL_NAMES = {v: k for k, v in LABEL_CODES.items()}


@dataclass
class DifferenceVolume:
    data: np.ndarray  # (T, S, S, 3) float32
    mode: Mode
    spec: SegmentSpec
    label: str

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[3] != 3:
            raise ValueError(f"bad volume shape {self.data.shape}")
        if self.label not in LABEL_CODES:
            raise ValueError(f"bad label {self.label!r}")
        n = len(self.spec.frame_indices)
        expected = n if self.mode == Mode.RAW else n - 1
        if self.data.shape[0] != expected:
            raise ValueError(f"{self.mode.name} volume of {n} frames must have T={expected}")

    @property
    def y(self) -> int:
        return LABEL_CODES[self.label]

    def __eq__(self, other):
        if not isinstance(other, DifferenceVolume):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.spec == other.spec
            and self.label == other.label
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def _frames(seg) -> np.ndarray:
    data = seg.data if isinstance(seg, FaceSegment) else np.asarray(seg)
    if data.shape[0] < 2:
        raise TooShort(f"need at least 2 frames, got {data.shape[0]}")
    return data


def cfd(data: np.ndarray) -> np.ndarray:
    """``|F[t+1] - F[t]|`` along the leading axis."""
    data = _frames(data)
    return np.abs(data[1:] - data[:-1])


def ssff(data: np.ndarray) -> np.ndarray:
    """``|F[t] - F[0]|`` for every frame after the first."""
    data = _frames(data)
    return np.abs(data[1:] - data[:1])


def build_cfd(seg: FaceSegment, label: str) -> DifferenceVolume:
    return DifferenceVolume(cfd(seg.data), Mode.CFD, seg.spec, label)


def build_ssff(seg: FaceSegment, label: str) -> DifferenceVolume:
    return DifferenceVolume(ssff(seg.data), Mode.SSFF, seg.spec, label)


def build_raw(seg: FaceSegment, label: str) -> DifferenceVolume:
    return DifferenceVolume(seg.data.copy(), Mode.RAW, seg.spec, label)


BUILDERS = {Mode.CFD: build_cfd, Mode.SSFF: build_ssff, Mode.RAW: build_raw}
TRANSFORMS = {Mode.CFD: cfd, Mode.SSFF: ssff, Mode.RAW: lambda d: np.array(d, copy=True)}


def build_volume(seg: FaceSegment, label: str, mode) -> DifferenceVolume:
    return BUILDERS[Mode.parse(mode)](seg, label)


def slice_view(vol: DifferenceVolume, axis: str, index: int) -> np.ndarray:
    """Space-time slice of a volume as a ``(T, S, 3)`` uint8 image.

    ``axis="x"`` fixes column ``index`` (a vertical line traced over time);
    ``axis="y"`` fixes row ``index``.
    """
    T, H, W, _ = vol.data.shape
    if axis == "x":
        if not 0 <= index < W:
            raise IndexOutOfRange(f"x={index} outside [0, {W})")
        sl = vol.data[:, :, index, :]
    elif axis == "y":
        if not 0 <= index < H:
            raise IndexOutOfRange(f"y={index} outside [0, {H})")
        sl = vol.data[:, index, :, :]
    else:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    return to_uint8(sl)


def to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# shards ---------------------------------------------------------------------
#
# header: magic "VODS" | u16 version | u16 mode | u32 count
# record: u32 len | spec JSON | u8 label | u32 dims[4] | f32 payload (t, y, x, c) | u32 crc32(payload)
# all integers little-endian


def write_shard(volumes: Sequence[DifferenceVolume], path) -> Path:
    if not volumes:
        raise ValueError("cannot write an empty shard")
    mode = volumes[0].mode
    if any(v.mode != mode for v in volumes):
        raise ValueError("a shard holds volumes of a single mode")
    buf = io.BytesIO()
    buf.write(SHARD_MAGIC + struct.pack("<HHI", SHARD_VERSION, int(mode), len(volumes)))
    for v in volumes:
        spec = json.dumps(v.spec.to_json(), separators=(",", ":")).encode()
        data = np.ascontiguousarray(v.data, dtype="<f4")
        payload = data.tobytes()
        buf.write(struct.pack("<I", len(spec)) + spec)
        buf.write(struct.pack("<B4I", LABEL_CODES[v.label], *data.shape))
        buf.write(payload)
        buf.write(struct.pack("<I", zlib.crc32(payload)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes, name: str):
        self.raw, self.pos, self.name = raw, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptShard(f"{self.name}: truncated at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_shard(path) -> list[DifferenceVolume]:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != SHARD_MAGIC:
        raise CorruptShard(f"{path}: bad magic")
    version, mode_code, count = r.unpack("<HHI")
    if version != SHARD_VERSION:
        raise VersionMismatch(f"{path}: shard version {version}, expected {SHARD_VERSION}")
    try:
        mode = Mode(mode_code)
    except ValueError as e:
        raise CorruptShard(f"{path}: unknown mode {mode_code}") from e
    out = []
    for _ in range(count):
        (n,) = r.unpack("<I")
        try:
            spec = SegmentSpec.from_json(json.loads(r.take(n)))
        except (ValueError, KeyError, TypeError) as e:
            raise CorruptShard(f"{path}: bad spec record") from e
        label, *dims = r.unpack("<B4I")
        payload = r.take(4 * int(np.prod(dims)))
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CorruptShard(f"{path}: CRC mismatch")
        if label not in LABEL_NAMES:
            raise CorruptShard(f"{path}: bad label code {label}")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        try:
            out.append(DifferenceVolume(data, mode, spec, LABEL_NAMES[label]))
        except ValueError as e:
            raise CorruptShard(f"{path}: {e}") from e
    if r.pos != len(r.raw):
        raise CorruptShard(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return out
