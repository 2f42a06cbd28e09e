"""Volume and mask data model, intensity windowing, and the MV01 file format.

A :class:`Volume` is a 3D scalar grid ``[D, H, W]`` (slices, rows, columns)
with voxel spacing in millimeters, a modality tag, and an intensity-unit tag.
A :class:`MaskVolume` is a binary grid aligned to a volume. Both are immutable
value objects: construction copies the array and freezes it, so every
operation in this package is a pure function over immutable inputs.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MV01"
HEADER_SIZE = 32


class Modality(enum.IntEnum):
    MR = 0
    CT = 1
    SYNCT = 2


class Units(enum.IntEnum):
    ARBITRARY = 0
    HU = 1
    NORMALIZED = 2


class UnitsError(ValueError):
    """Raised when an operation is applied to a volume in the wrong units."""


class VolumeFormatError(ValueError):
    """Raised for malformed MV01 files. ``offset`` is the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar image with spacing (dz, dy, dx in mm), modality, and units."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality
    units: Units

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D [D, H, W], got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        # float32 spacing so file round trips are exact on every field
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        modality = Modality(self.modality)
        units = Units(self.units)
        if units == Units.HU and modality not in (Modality.CT, Modality.SYNCT):
            raise UnitsError(f"HU units are only valid for CT or SYNCT, not {modality.name}")
        if units == Units.NORMALIZED and (data.min() < -1.0 or data.max() > 1.0):
            raise ValueError(
                f"NORMALIZED volume has values outside [-1, 1]: "
                f"min={data.min():.6g} max={data.max():.6g}"
            )
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "modality", modality)
        object.__setattr__(self, "units", units)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary 3D label grid aligned to a Volume."""

    labels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"mask labels must be 3D [D, H, W], got shape {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint8)))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def voxel_count(self) -> int:
        return int(self.labels.sum())


def window_clip(v: Volume, lo: float, hi: float) -> Volume:
    """Clip an HU volume to the window [lo, hi] (e.g. a -500..500 soft-tissue window)."""
    if v.units != Units.HU:
        raise UnitsError(f"window_clip requires HU units, got {v.units.name}")
    if not lo < hi:
        raise ValueError(f"window requires lo < hi, got lo={lo}, hi={hi}")
    return Volume(np.clip(v.data, lo, hi), v.spacing, v.modality, Units.HU)


def normalize(v: Volume, lo: float, hi: float) -> Volume:
    """Map [lo, hi] affinely onto [-1, 1], clamping values outside the range."""
    if not lo < hi:
        raise ValueError(f"normalize requires lo < hi, got lo={lo}, hi={hi}")
    x = np.clip(v.data.astype(np.float64), lo, hi)
    out = 2.0 * (x - lo) / (hi - lo) - 1.0
    return Volume(out.astype(np.float32), v.spacing, v.modality, Units.NORMALIZED)


def _crop_slices(h: int, w: int, fraction: float) -> tuple[slice, slice]:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"crop fraction must be in (0, 1], got {fraction}")
    nh, nw = int(h * fraction), int(w * fraction)
    if nh < 1 or nw < 1:
        raise ValueError(f"crop fraction {fraction} yields empty in-plane dims ({nh}x{nw})")
    # Odd remainders discard the extra row/column from the low-index side.
    top = (h - nh + 1) // 2
    left = (w - nw + 1) // 2
    return slice(top, top + nh), slice(left, left + nw)


def central_crop(v: Volume | MaskVolume, fraction: float) -> Volume | MaskVolume:
    """Centrally crop in-plane dims to floor(H*fraction) x floor(W*fraction)."""
    d, h, w = v.shape
    rows, cols = _crop_slices(h, w, fraction)
    if isinstance(v, MaskVolume):
        return MaskVolume(v.labels[:, rows, cols], v.spacing)
    return Volume(v.data[:, rows, cols], v.spacing, v.modality, v.units)


def _encode_header(dims: tuple[int, int, int], spacing, modality: int, units: int) -> bytes:
    return (
        MAGIC
        + struct.pack("<BBBB", modality, units, 0, 0)
        + struct.pack("<3I", *dims)
        + struct.pack("<3f", *spacing)
    )


def write_volume(v: Volume, path) -> None:
    """Write a volume in the MV01 container (see module docs for the layout)."""
    header = _encode_header(v.shape, v.spacing, int(v.modality), int(v.units))
    with open(path, "wb") as f:
        f.write(header)
        f.write(v.data.astype("<f4", copy=False).tobytes())


def write_mask(m: MaskVolume, path) -> None:
    """Write a mask in the MV01 container (units ARBITRARY, values in {0, 1})."""
    header = _encode_header(m.shape, m.spacing, int(Modality.MR), int(Units.ARBITRARY))
    with open(path, "wb") as f:
        f.write(header)
        f.write(m.labels.astype("<f4").tobytes())


def _read_container(path) -> tuple[np.ndarray, tuple, int, int]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise VolumeFormatError(f"bad magic bytes in {path!s}: expected {MAGIC!r}", offset=0)
    if len(buf) < HEADER_SIZE:
        raise VolumeFormatError(
            f"truncated header in {path!s}: expected {HEADER_SIZE} bytes, got {len(buf)}",
            offset=len(buf),
        )
    modality, units = buf[4], buf[5]
    if modality not in (0, 1, 2):
        raise VolumeFormatError(f"unknown modality byte {modality}", offset=4)
    if units not in (0, 1, 2):
        raise VolumeFormatError(f"unknown units byte {units}", offset=5)
    dims = struct.unpack_from("<3I", buf, 8)
    spacing = struct.unpack_from("<3f", buf, 20)
    expected = int(dims[0]) * int(dims[1]) * int(dims[2]) * 4
    actual = len(buf) - HEADER_SIZE
    if expected != actual:
        raise VolumeFormatError(
            f"payload size mismatch in {path!s}: header dims {dims} require "
            f"{expected} bytes, file carries {actual}",
            offset=HEADER_SIZE,
        )
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(dims)
    return data, spacing, modality, units


def read_volume(path) -> Volume:
    """Read a volume written by :func:`write_volume`; bit-exact round trip."""
    data, spacing, modality, units = _read_container(path)
    return Volume(data, spacing, Modality(modality), Units(units))


def read_mask(path) -> MaskVolume:
    """Read a mask written by :func:`write_mask`."""
    data, spacing, _, units = _read_container(path)
    if units != int(Units.ARBITRARY):
        raise VolumeFormatError(f"mask file must use ARBITRARY units, got {units}", offset=5)
    if not np.isin(data, (0.0, 1.0)).all():
        raise VolumeFormatError(f"mask file {path!s} contains values outside {{0, 1}}")
    return MaskVolume(data.astype(np.uint8), spacing)
