"""Volumes, masks, file formats and the preprocessing steps.

Arrays are indexed ``[x, y, z]``. On disk the x index varies fastest, so the
voxel ``(x, y, z)`` lives at linear position ``x + X*(y + Y*z)``; this matches
NIfTI storage order.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Volume",
    "Mask",
    "BoundingBox",
    "FormatError",
    "write_srv",
    "read_srv",
    "read_nifti",
    "fuse_masks",
    "bounding_box",
    "crop_centered",
    "zscore_normalize",
    "binarize",
]


class FormatError(ValueError):
    """A volume file is malformed or unsupported."""


@dataclass
class Volume:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class Mask:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"mask must be 3-D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        self.data = arr
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive ``(lo, hi)`` index range per axis."""

    ranges: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(hi - lo + 1 for lo, hi in self.ranges)

    def contains(self, other: "BoundingBox") -> bool:
        return all(lo <= olo and ohi <= hi for (lo, hi), (olo, ohi) in zip(self.ranges, other.ranges))


# ---------------------------------------------------------------------------
# SRV: b"SRV1" + one JSON header line + raw little-endian payload

SRV_MAGIC = b"SRV1"
_SRV_DTYPES = {"u8": np.dtype("u1"), "f32": np.dtype("<f4")}


def write_srv(v: Volume | Mask, path: str | os.PathLike) -> None:
    tag = "u8" if isinstance(v, Mask) else "f32"
    header = {"dims": list(v.dims), "spacing_mm": list(v.spacing_mm), "dtype": tag}
    payload = np.asarray(v.data, dtype=_SRV_DTYPES[tag]).tobytes(order="F")
    blob = SRV_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    atomic_write_bytes(path, blob)


def read_srv(path: str | os.PathLike) -> Volume | Mask:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SRV_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {SRV_MAGIC!r}")
    nl = blob.find(b"\n", 4)
    if nl < 0:
        raise FormatError(f"{path}: missing header terminator")
    try:
        header = json.loads(blob[4:nl].decode())
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        dtype = _SRV_DTYPES[header["dtype"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from exc
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise FormatError(f"{path}: dims must be three positive integers, got {dims}")
    payload = blob[nl + 1:]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected} for dims {dims}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    if header["dtype"] == "u8":
        return Mask(np.array(data, dtype=np.uint8), spacing)
    return Volume(np.array(data, dtype=np.float32), spacing)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    tmp = f"{os.fspath(path)}.tmp-{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


# ---------------------------------------------------------------------------
# NIfTI-1 (single file, read only)

_NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}


def read_nifti(path: str | os.PathLike) -> Volume:
    """Read a 3-D ``.nii`` or ``.nii.gz`` file.

    Only dims, pixdim and the intensity scaling are honoured; orientation
    matrices are ignored and data stays in stored voxel order.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise FormatError(f"{path}: file shorter than the 348-byte NIfTI-1 header")
    if struct.unpack("<i", raw[:4])[0] == 348:
        endian = "<"
    elif struct.unpack(">i", raw[:4])[0] == 348:
        endian = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    if raw[344:348] != b"n+1\x00":
        raise FormatError(f"{path}: magic {raw[344:348]!r} is not single-file NIfTI-1 'n+1'")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, _bitpix = struct.unpack(endian + "hh", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "ff", raw[112:120])

    if dim[0] != 3:
        raise FormatError(f"{path}: only 3-D volumes are supported, header has {dim[0]} dimensions")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: invalid dims {dims}")
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported datatype code {datatype} (need 2, 4 or 16)")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    count = int(np.prod(dims))
    need = vox_offset + count * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: payload truncated, need {need} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset).reshape(dims, order="F")
    data = data.astype(np.float64)
    if slope != 0 and np.isfinite(slope):
        data = data * slope + inter
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    return Volume(data.astype(np.float32), spacing)


# ---------------------------------------------------------------------------
# Preprocessing


def fuse_masks(left: Mask, right: Mask) -> Mask:
    """Combine the two hemispheric labels into one (voxelwise OR)."""
    if left.dims != right.dims:
        raise ValueError(f"mask dims differ: {left.dims} vs {right.dims}")
    summed = left.data.astype(np.int16) + right.data
    return Mask(np.minimum(summed, 1).astype(np.uint8), left.spacing_mm)


def bounding_box(m: Mask) -> BoundingBox:
    if not m.data.any():
        raise ValueError("bounding_box of an empty mask")
    ranges = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(m.data.any(axis=other))
        ranges.append((int(hits[0]), int(hits[-1])))
    return BoundingBox(tuple(ranges))


def crop_centered(v: Volume, m: Mask, target: Sequence[int], margin: int = 4
                  ) -> tuple[Volume, Mask, BoundingBox]:
    """Cut a ``target``-sized window centred on the mask's bounding box.

    The window is shifted as needed so it holds the whole box plus ``margin``
    voxels on each side, then clamped to the volume. Returns the cropped
    volume, cropped mask, and the window as a :class:`BoundingBox` in source
    coordinates.
    """
    if v.dims != m.dims:
        raise ValueError(f"volume dims {v.dims} differ from mask dims {m.dims}")
    target = tuple(int(t) for t in target)
    if len(target) != 3:
        raise ValueError(f"target must have three extents, got {target}")
    box = bounding_box(m)
    window = []
    for axis, (t, dim, (lo, hi)) in enumerate(zip(target, v.dims, box.ranges)):
        if t > dim:
            raise ValueError(f"axis {axis}: target {t} exceeds volume extent {dim}")
        # margins are only owed where they fit inside the volume
        lo_m, hi_m = max(lo - margin, 0), min(hi + margin, dim - 1)
        need = hi_m - lo_m + 1
        if need > t:
            raise ValueError(
                f"axis {axis}: target {t} too small, box extent {hi - lo + 1} plus margins needs {need}"
            )
        start = (lo + hi) // 2 - t // 2
        start = min(max(start, hi_m - t + 1), lo_m)
        start = min(max(start, 0), dim - t)
        window.append((start, start + t - 1))
    sl = tuple(slice(a, b + 1) for a, b in window)
    return Volume(v.data[sl], v.spacing_mm), Mask(m.data[sl], m.spacing_mm), BoundingBox(tuple(window))


def zscore_normalize(v: Volume, eps: float = 1e-8) -> Volume:
    data = v.data.astype(np.float64)
    mu = data.mean()
    sd = data.std()
    if sd < eps:
        return Volume(np.zeros_like(v.data), v.spacing_mm)
    return Volume(((data - mu) / sd).astype(np.float32), v.spacing_mm)


def binarize(prob: Volume | np.ndarray, threshold: float = 0.5) -> Mask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(prob, Volume):
        return Mask((prob.data >= threshold).astype(np.uint8), prob.spacing_mm)
    return Mask((np.asarray(prob) >= threshold).astype(np.uint8))
