"""Retinal vessel segmentation pipeline: trio preprocessing (Gaussian blur,
Gabor bank, Sobel+pruning), two U-Net variants with hand-written
backpropagation, deterministic augmentation/splitting, training, and the
full metric suite including the efficacy ratio."""

from .augment import SplitManifest, augment_dataset, flip, rotate, rotate_mask, split_dataset
from .filters import (
    GaborParams,
    GaussianParams,
    Kernel2D,
    SobelPruneParams,
    convolve2d,
    default_gabor_bank,
    gabor_kernel,
    gabor_response,
    gaussian_blur,
    gaussian_kernel,
    prune_spurs,
    sobel_magnitude,
    sobel_prune,
)
from .image_core import (
    BinaryMask,
    DatasetManifest,
    GrayImage,
    ManifestEntry,
    discover_dataset,
    load_image,
    load_mask,
    resize_bilinear,
    resize_nearest,
    save_image,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    confusion,
    efficacy_ratio,
    hard_metrics,
    soft_dice_metric,
)
from .tensor_nn import AdamState, adam_step, soft_dice_loss
from .trainer import TrainConfig, TrainHistory, evaluate, predict, train
from .unet import (
    Model,
    UNetConfig,
    build_unet,
    load_checkpoint,
    param_shapes,
    parameter_count,
    reti_unet1,
    reti_unet2,
    save_checkpoint,
    unet_backward,
    unet_forward,
)

__version__ = "0.1.0"
