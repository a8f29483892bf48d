"""Invert trained CNN classifiers into synthetic class-conditional images by
matching batch-norm statistics, then reuse the images for data-free
distillation, filter pruning, and class-incremental learning."""

from .tensor import Tensor, no_grad, set_default_dtype, default_dtype
from .nn import Model, build_model, save_checkpoint, load_checkpoint
from .data import LabeledBatch, Preprocess, gen_shapes, load_idx_mnist, load_cifar10_bin
from .inversion import (SynthesisConfig, ImageBatch, ImageStore, synthesize,
                        synthesize_multires, stats_from_images, clip_images)
from .distill import DistillConfig, kd_loss, distill, adaptive_loop, train_teacher, evaluate
from .pruning import PruneConfig, PrunePlan, LatencyLUT, build_lut, estimate_latency, prune_loop
from .continual import ContinualTask, extend_head, continual_loss, continual_train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "set_default_dtype", "default_dtype",
    "Model", "build_model", "save_checkpoint", "load_checkpoint",
    "LabeledBatch", "Preprocess", "gen_shapes", "load_idx_mnist", "load_cifar10_bin",
    "SynthesisConfig", "ImageBatch", "ImageStore", "synthesize", "synthesize_multires",
    "stats_from_images", "clip_images",
    "DistillConfig", "kd_loss", "distill", "adaptive_loop", "train_teacher", "evaluate",
    "PruneConfig", "PrunePlan", "LatencyLUT", "build_lut", "estimate_latency", "prune_loop",
    "ContinualTask", "extend_head", "continual_loss", "continual_train",
]
