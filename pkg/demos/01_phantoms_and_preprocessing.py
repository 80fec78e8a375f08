"""
Synthetic phantoms and preprocessing
====================================

Generate two-ellipsoid phantoms, fuse their left/right labels, crop around
the structure and standardise the intensities.
"""

import numpy as np

from volseg import (
    Mask, PhantomSpec, Volume, bounding_box, crop_centered, fuse_masks, generate_phantoms, zscore_normalize,
)

# A phantom is a noisy volume plus one mask per ellipsoid.
spec = PhantomSpec(size=32, count=3, seed=7)
samples = generate_phantoms(spec)
vol, left, right = samples[0]
print("volume", vol.dims, "left voxels", left.count(), "right voxels", right.count())

# The two labels never overlap, so the fused count is their sum.
mask = fuse_masks(left, right)
print("fused voxels", mask.count())

box = bounding_box(mask)
print("bounding box", box.ranges, "extent", box.extent)

# Crop to a fixed window that keeps the whole box plus a small margin.
cv, cm, window = crop_centered(vol, mask, target=(32, 24, 24), margin=2)
print("window", window.ranges, "-> crop", cv.dims, "voxels kept", cm.count())

z = zscore_normalize(cv)
print(f"after z-score: mean {z.data.mean():+.2e}, std {z.data.std():.4f}")

# Same recipe on a larger synthetic scan, cropped to 128 x 128 x 64.
big = np.zeros((256, 256, 128), np.uint8)
big[110:125, 100:140, 50:75] = 1
cv, cm, _ = crop_centered(Volume(np.random.default_rng(0).normal(size=big.shape)), Mask(big), (128, 128, 64))
print("large scan crop", cv.dims, "voxels kept", cm.count(), "of", int(big.sum()))
