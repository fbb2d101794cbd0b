"""Graph-convolutional U-shaped network for binary image segmentation,
implemented on a small numpy autodiff engine."""

from .tensor import (Tensor, ShapeError, no_grad, make_rng, concat, take,
                     gelu, sigmoid, softplus, conv2d, bilinear_upsample,
                     droppath, write_array, read_array)
from .layers import Conv2d, BatchNorm2d, StateError, kaiming_uniform
from .graph import (KnnGraph, knn_graph, pairwise_sq_dist, mr_aggregate,
                    head_split_update, UpdateHeads, to_nodes, to_map)
from .blocks import Grapher, Ffn, Stem, Downsample, Upsample
from .model import (StageConfig, ModelConfig, VigUnet, build_vig_unet,
                    count_parameters, parameter_table, save_checkpoint,
                    load_checkpoint, CheckpointError, CheckpointMagicError,
                    CheckpointVersionError, CheckpointTruncatedError,
                    CheckpointShapeError)
from .training import (bce_loss, dice_loss, mixed_loss, iou_metric,
                       dice_metric, predict_mask, Adam, CosineSchedule,
                       channel_stats, normalize_image, augment_sample,
                       train_epoch, evaluate, EvalReport, fit)
from .data import (SegSample, SplitSpec, load_dataset, split_dataset,
                   generate_synthetic)
from .config import RunConfig, ConfigError, parse_config, load_config
from .estimator import VigUnetSegmenter

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "no_grad", "make_rng", "concat", "take", "gelu",
    "sigmoid", "softplus", "conv2d", "bilinear_upsample", "droppath",
    "write_array", "read_array",
    "Conv2d", "BatchNorm2d", "StateError", "kaiming_uniform",
    "KnnGraph", "knn_graph", "pairwise_sq_dist", "mr_aggregate",
    "head_split_update", "UpdateHeads", "to_nodes", "to_map",
    "Grapher", "Ffn", "Stem", "Downsample", "Upsample",
    "StageConfig", "ModelConfig", "VigUnet", "build_vig_unet",
    "count_parameters", "parameter_table", "save_checkpoint",
    "load_checkpoint", "CheckpointError", "CheckpointMagicError",
    "CheckpointVersionError", "CheckpointTruncatedError",
    "CheckpointShapeError",
    "bce_loss", "dice_loss", "mixed_loss", "iou_metric", "dice_metric",
    "predict_mask", "Adam", "CosineSchedule", "channel_stats",
    "normalize_image", "augment_sample", "train_epoch", "evaluate",
    "EvalReport", "fit",
    "SegSample", "SplitSpec", "load_dataset", "split_dataset",
    "generate_synthetic",
    "RunConfig", "ConfigError", "parse_config", "load_config",
    "VigUnetSegmenter",
]
