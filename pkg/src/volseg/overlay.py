"""Mid-slice PNG overlays of a mask boundary on its volume.

Plane conventions for an ``[x, y, z]`` array, with image rows/cols:

* axial (transverse): fixed z, rows = y, cols = x
* coronal: fixed y, rows = z, cols = x
* sagittal: fixed x, rows = z, cols = y
"""

from __future__ import annotations

import os
import warnings

import numpy as np
from PIL import Image

from .volume import Mask, Volume

__all__ = ["BOUNDARY_RGB", "boundary_2d", "overlay_slices", "export_overlay"]

BOUNDARY_RGB = (255, 0, 0)
PLANES = ("axial", "coronal", "sagittal")


def boundary_2d(mask2d: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one non-mask 4-neighbour (outside counts as non-mask)."""
    m = mask2d.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _to_gray(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.clip(np.round((img - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def _slice_planes(arr: np.ndarray, center) -> dict[str, np.ndarray]:
    cx, cy, cz = center
    return {
        "axial": arr[:, :, cz].T,
        "coronal": arr[:, cy, :].T,
        "sagittal": arr[cx, :, :].T,
    }


def overlay_slices(volume: Volume, mask: Mask) -> dict[str, np.ndarray]:
    """RGB ``uint8`` images for the three planes through the mask centroid."""
    if volume.dims != mask.dims:
        raise ValueError(f"volume dims {volume.dims} differ from mask dims {mask.dims}")
    if mask.data.any():
        center = tuple(int(round(c)) for c in np.argwhere(mask.data).mean(axis=0))
    else:
        warnings.warn("empty mask: writing plain mid-slices without a boundary", stacklevel=2)
        center = tuple(d // 2 for d in volume.dims)
    lo, hi = float(volume.data.min()), float(volume.data.max())
    vols = _slice_planes(volume.data, center)
    masks = _slice_planes(mask.data, center)
    images = {}
    for plane in PLANES:
        gray = _to_gray(vols[plane], lo, hi)
        rgb = np.repeat(gray[..., None], 3, axis=-1)
        rgb[boundary_2d(masks[plane])] = BOUNDARY_RGB
        images[plane] = rgb
    return images


def export_overlay(volume: Volume, mask: Mask, out_path: str | os.PathLike) -> dict[str, str]:
    """Write ``{out_path}_axial.png``, ``_coronal.png`` and ``_sagittal.png``.

    If ``out_path`` is an existing directory the files are named
    ``overlay_<plane>.png`` inside it.
    """
    base = os.fspath(out_path)
    if os.path.isdir(base):
        base = os.path.join(base, "overlay")
    paths = {}
    for plane, rgb in overlay_slices(volume, mask).items():
        path = f"{base}_{plane}.png"
        tmp = f"{path}.tmp-{os.getpid()}"
        Image.fromarray(rgb, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
        paths[plane] = path
    return paths
