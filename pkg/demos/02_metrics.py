"""
Overlap metrics
===============

Confusion counts and the four overlap scores for a prediction that is
shifted by one voxel.
"""

import numpy as np

from volseg import aggregate, confusion_counts, metrics_from_counts, report_volume

gt = np.zeros((16, 16, 16), np.uint8)
gt[4:12, 4:12, 4:12] = 1
pred = np.roll(gt, 1, axis=0)

c = confusion_counts(pred, gt)
print(c)
dsc, sens, ppv, iou = metrics_from_counts(c)
print(f"dsc {dsc:.4f}  sensitivity {sens:.4f}  ppv {ppv:.4f}  iou {iou:.4f}")

# Dice and IoU carry the same information.
print("2*iou/(1+iou) =", 2 * iou / (1 + iou))

# Two empty masks agree perfectly.
print(metrics_from_counts(confusion_counts(np.zeros_like(gt), np.zeros_like(gt))))

# Averaging over volumes versus pooling all voxels.
reports = [report_volume(pred, gt, "shifted"), report_volume(gt, gt, "exact")]
print("macro", aggregate(reports)["mean"])
print("micro", aggregate(reports, micro=True)["mean"])
