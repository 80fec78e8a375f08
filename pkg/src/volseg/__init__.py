"""Volumetric segmentation with a from-scratch 3D U-Net on numpy."""

from .metrics import ConfusionCounts, MetricsReport, aggregate, confusion_counts, metrics_from_counts, report_volume
from .phantom import PhantomSpec, generate_phantoms
from .tensor import Tensor, backward, grad_check, no_grad, randn_tensor
from .training import AdamState, Dataset, TrainConfig, adam_step, evaluate_split, train
from .unet import UNetConfig, build_unet, load_model, param_count, save_model
from .volume import (
    BoundingBox,
    Mask,
    Volume,
    binarize,
    bounding_box,
    crop_centered,
    fuse_masks,
    read_nifti,
    read_srv,
    write_srv,
    zscore_normalize,
)

__version__ = "0.1.0"
