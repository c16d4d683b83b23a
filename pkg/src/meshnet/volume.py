"""Volume containers, subvolume extraction and the VVOL binary format.

Memory order is channel-major: (C, D, H, W), i.e. channel, depth (z),
row (y), column (x).  A probability map is just a Volume with one channel
per class.

VVOL layout, little-endian throughout::

    b"VVOL" | u32 version=1 | u32 dtype (1=float32, 2=uint8 labels)
    | u32 M | u32 D | u32 H | u32 W | raw data | [u32 N, labels only]
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, OutOfBounds, ShapeMismatch, TruncatedFile, UnsupportedVersion

MAGIC = b"VVOL"
VERSION = 1
DTYPE_FLOAT32 = 1
DTYPE_LABELS = 2
_HEADER = struct.Struct("<4sIIIIII")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray  # float32, (M, D, H, W)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeMismatch(f"volume data must be 4-D (M, D, H, W), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeMismatch(f"all volume dims must be >= 1, got {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    labels: np.ndarray  # uint8, (D, H, W)
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ShapeMismatch(f"label data must be 3-D (D, H, W), got shape {labels.shape}")
        if not 1 <= self.num_classes <= 256:
            raise ValueError(f"num_classes must be in [1, 256], got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8, copy=False)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.labels.shape == other.labels.shape
            and bool(np.array_equal(self.labels, other.labels))
        )


@dataclass(frozen=True)
class SubvolumeRef:
    origin: tuple[int, int, int]  # (z, y, x)
    side: int

    def check(self, dims) -> None:
        if self.side < 1:
            raise OutOfBounds(f"subvolume side must be >= 1, got {self.side}")
        for o, d in zip(self.origin, dims):
            if o < 0 or o + self.side > d:
                raise OutOfBounds(f"subvolume origin={self.origin} side={self.side} exceeds dims {tuple(dims)}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.side) for o in self.origin)


def extract_subvolume(vol: Volume, ref: SubvolumeRef) -> Volume:
    ref.check(vol.dims)
    return Volume(vol.data[(slice(None),) + ref.slices].copy())


def extract_labels(lab: LabelVolume, ref: SubvolumeRef) -> LabelVolume:
    ref.check(lab.dims)
    return LabelVolume(lab.labels[ref.slices].copy(), lab.num_classes)


def write_volume(vol: Volume | LabelVolume, path: str | os.PathLike) -> None:
    if isinstance(vol, LabelVolume):
        d, h, w = vol.dims
        header = _HEADER.pack(MAGIC, VERSION, DTYPE_LABELS, 1, d, h, w)
        payload = vol.labels.astype("<u1").tobytes() + struct.pack("<I", vol.num_classes)
    else:
        m, (d, h, w) = vol.channels, vol.dims
        header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, m, d, h, w)
        payload = vol.data.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_volume(path: str | os.PathLike) -> Volume | LabelVolume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, dtype, m, d, h, w = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: VVOL version {version}, only {VERSION} supported")
    n = m * d * h * w
    body = raw[_HEADER.size:]
    if dtype == DTYPE_FLOAT32:
        if len(body) < 4 * n:
            raise TruncatedFile(f"{path}: expected {4 * n} data bytes, found {len(body)}")
        data = np.frombuffer(body, dtype="<f4", count=n).reshape(m, d, h, w)
        return Volume(data.astype(np.float32))
    if dtype == DTYPE_LABELS:
        if m != 1:
            raise ShapeMismatch(f"{path}: label volume must have M=1, got {m}")
        if len(body) < n + 4:
            raise TruncatedFile(f"{path}: expected {n + 4} label bytes, found {len(body)}")
        labels = np.frombuffer(body, dtype="<u1", count=n).reshape(d, h, w)
        (num_classes,) = struct.unpack_from("<I", body, n)
        return LabelVolume(labels.copy(), num_classes)
    raise UnsupportedVersion(f"{path}: unknown dtype code {dtype}")
