"""Synthetic paired-ellipsoid phantoms with known left/right masks."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .volume import Mask, Volume, atomic_write_bytes, write_srv

__all__ = ["PhantomSpec", "generate_phantoms", "render_sample", "write_phantom_dir"]


@dataclass
class PhantomSpec:
    size: int = 32
    count: int = 1
    seed: int = 0
    foreground_mean: float = 1.0
    background_mean: float = 0.0
    noise_std: float = 0.1
    semi_axis_min: tuple[float, float, float] = (4.0, 4.0, 4.0)
    semi_axis_max: tuple[float, float, float] = (7.0, 7.0, 7.0)
    center_jitter: float = 2.0
    gap: float = 2.0

    def __post_init__(self):
        self.semi_axis_min = tuple(float(a) for a in self.semi_axis_min)
        self.semi_axis_max = tuple(float(a) for a in self.semi_axis_max)
        self.validate()

    def validate(self) -> None:
        if self.size < 1 or self.count < 0:
            raise ValueError("size must be positive and count non-negative")
        if self.noise_std < 0 or self.center_jitter < 0 or self.gap < 0:
            raise ValueError("noise_std, center_jitter and gap must be non-negative")
        if min(self.semi_axis_min) < 2:
            raise ValueError(f"semi-axes must be >= 2, got minimum {self.semi_axis_min}")
        if any(lo > hi for lo, hi in zip(self.semi_axis_min, self.semi_axis_max)):
            raise ValueError("semi_axis_min exceeds semi_axis_max")
        amax = max(self.semi_axis_max)
        if not 2 * amax + self.gap < self.size:
            raise ValueError(f"2*max semi-axis + gap = {2 * amax + self.gap} must be < size {self.size}")
        # The two ellipsoids sit side by side along x.
        width = 4 * self.semi_axis_max[0] + self.gap
        if width > self.size:
            raise ValueError(
                f"two ellipsoids with x semi-axis {self.semi_axis_max[0]} and gap {self.gap} "
                f"need {width} voxels along x, size is {self.size}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _ellipsoid(grid, center, axes) -> np.ndarray:
    x, y, z = grid
    (cx, cy, cz), (a, b, c) = center, axes
    return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0


def render_sample(spec: PhantomSpec, index: int) -> tuple[Volume, Mask, Mask]:
    """Sample ``index`` of ``spec``; depends only on ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, spec.seed >> 32, index])
    n = spec.size
    mid = (n - 1) / 2.0
    lo, hi = np.array(spec.semi_axis_min), np.array(spec.semi_axis_max)
    axes_l = rng.uniform(lo, hi)
    axes_r = rng.uniform(lo, hi)

    # Centres sit on the quarter-voxel lattice (integer + 0.25): voxel-centre
    # sampling of a small ellipsoid is then within a few percent of its
    # analytic volume, unlike integer or half-integer centres. x centres are
    # snapped away from the midline so the gap never shrinks; the rooms below
    # reserve the extra voxel this can cost.
    half_gap = spec.gap / 2.0
    room_l = max(0.0, mid - half_gap - 2 * axes_l[0] - 1.0)
    room_r = max(0.0, (n - 1) - (mid + half_gap + 2 * axes_r[0]) - 1.0)
    cx_l = mid - half_gap - axes_l[0] - rng.uniform(0, min(spec.center_jitter, room_l))
    cx_r = mid + half_gap + axes_r[0] + rng.uniform(0, min(spec.center_jitter, room_r))
    cx_l = np.floor(cx_l - 0.25) + 0.25
    cx_r = np.ceil(cx_r - 0.25) + 0.25

    def yz(axes):
        out = []
        for a in axes[1:]:
            room = max(0.0, mid - a - 0.5)
            j = min(spec.center_jitter, room)
            out.append(np.round(mid + rng.uniform(-j, j) - 0.25) + 0.25)
        return out

    c_l = (cx_l, *yz(axes_l))
    c_r = (cx_r, *yz(axes_r))
    grid = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    left = _ellipsoid(grid, c_l, axes_l)
    right = _ellipsoid(grid, c_r, axes_r)

    data = np.where(left | right, spec.foreground_mean, spec.background_mean)
    if spec.noise_std > 0:
        data = data + rng.normal(0.0, spec.noise_std, size=data.shape)
    return Volume(data.astype(np.float32)), Mask(left.astype(np.uint8)), Mask(right.astype(np.uint8))


def generate_phantoms(spec: PhantomSpec) -> list[tuple[Volume, Mask, Mask]]:
    spec.validate()
    return [render_sample(spec, i) for i in range(spec.count)]


def write_phantom_dir(spec: PhantomSpec, out_dir: str | os.PathLike) -> list[str]:
    """Write ``{i}_vol.srv``, ``{i}_maskL.srv``, ``{i}_maskR.srv`` and ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i, (vol, left, right) in enumerate(generate_phantoms(spec)):
        for suffix, obj in (("vol", vol), ("maskL", left), ("maskR", right)):
            path = os.path.join(out_dir, f"{i}_{suffix}.srv")
            write_srv(obj, path)
            written.append(path)
    manifest = os.path.join(out_dir, "manifest.json")
    atomic_write_bytes(manifest, (json.dumps({"spec": spec.to_dict()}, indent=2, sort_keys=True) + "\n").encode())
    written.append(manifest)
    return written
