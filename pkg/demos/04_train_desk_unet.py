"""
Training a small U-Net on phantoms
==================================

A three-level network learns to segment the ellipsoids. Runs in well under
a minute on one core.
"""

import logging

from volseg import (
    Dataset, PhantomSpec, TrainConfig, UNetConfig, build_unet, fuse_masks, generate_phantoms, param_count,
    train, zscore_normalize,
)
from volseg.training import evaluate_split, single_threaded

logging.basicConfig(level=logging.INFO, format="%(message)s")


def dataset(seed, count, split):
    pairs = [(zscore_normalize(v), fuse_masks(l, r)) for v, l, r in generate_phantoms(PhantomSpec(count=count, seed=seed))]
    return Dataset(pairs, split)


train_set = dataset(1, 6, "train")
test_set = dataset(2, 3, "test")

cfg = UNetConfig.preset("desk")
print("channels", cfg.channel_schedule, "parameters", param_count(cfg))
model = build_unet(cfg, seed=0)

# Pinning BLAS to one thread makes repeated runs bitwise identical.
with single_threaded():
    model, history = train(model, train_set, test_set, TrainConfig(epochs=4, lr=1e-2))

for rec in history:
    print(rec)

iou, reports = evaluate_split(model, test_set)
for r in reports:
    print(f"test {r.id}: dsc {r.dsc:.3f} iou {r.iou:.3f}")
