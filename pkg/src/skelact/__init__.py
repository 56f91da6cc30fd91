"""Skeleton-based surgical gesture recognition with spatial-temporal graph
convolutional networks."""

__version__ = "0.1.0"

from .datapipe import (
    SUTURING_GESTURES,
    GestureDataset,
    PoseSequence,
    SegmentTensor,
    Transcript,
    build_louo_folds,
    load_dataset,
    load_pose_file,
    load_transcript,
    normalize_coords,
    segment,
)
from .errors import NumericalError, SkelactError, ValidationError
from .estimator import SkeletonGestureClassifier, check_segment_array
from .evalharness import CrossvalReport, FoldResult, crossval, emit_report, evaluate_fold
from .graph import (
    PartitionedAdjacency,
    SkeletonSpec,
    build_adjacency,
    build_partition_stack,
    default_tool_skeleton,
    load_skeleton,
    normalize_partitions,
    save_skeleton,
    spatial_config_partition,
)
from .model import ModelConfig, StgcnModel, StgcnParams, load_params, save_params
from .numerics import Tape, Tensor, grad_check
from .synth import synth_dataset
from .trainer import TrainConfig, TrainState, lr_at, sgd_step, train

__all__ = [
    "SUTURING_GESTURES",
    "CrossvalReport",
    "FoldResult",
    "GestureDataset",
    "ModelConfig",
    "NumericalError",
    "PartitionedAdjacency",
    "PoseSequence",
    "SegmentTensor",
    "SkelactError",
    "SkeletonGestureClassifier",
    "SkeletonSpec",
    "StgcnModel",
    "StgcnParams",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "Transcript",
    "ValidationError",
    "build_adjacency",
    "build_louo_folds",
    "build_partition_stack",
    "check_segment_array",
    "crossval",
    "default_tool_skeleton",
    "emit_report",
    "evaluate_fold",
    "grad_check",
    "load_dataset",
    "load_params",
    "load_pose_file",
    "load_skeleton",
    "load_transcript",
    "lr_at",
    "normalize_coords",
    "normalize_partitions",
    "save_params",
    "save_skeleton",
    "segment",
    "sgd_step",
    "spatial_config_partition",
    "synth_dataset",
    "train",
]
