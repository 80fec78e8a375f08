"""
Boundary overlays
=================

Write axial, coronal and sagittal PNGs with the mask outline in red.
"""

import tempfile

import numpy as np

from volseg import PhantomSpec, fuse_masks, generate_phantoms
from volseg.overlay import export_overlay, overlay_slices

vol, left, right = generate_phantoms(PhantomSpec(count=1, seed=4))[0]
mask = fuse_masks(left, right)

images = overlay_slices(vol, mask)
for plane, rgb in images.items():
    red = np.all(rgb == (255, 0, 0), axis=-1).sum()
    print(f"{plane:9s} {rgb.shape} boundary pixels {red}")

out = tempfile.mkdtemp()
for plane, path in export_overlay(vol, mask, f"{out}/phantom").items():
    print("wrote", path)
