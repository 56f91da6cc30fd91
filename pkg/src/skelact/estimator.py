"""Scikit-learn style estimator wrapping the full train/predict pipeline.

``SkeletonGestureClassifier`` takes samples as a 5-D array of segment
tensors (N samples, 3 channels, T frames, V joints, M tool instances) and
integer or string labels, so it composes with sklearn model selection and
pipelines.  Fragment resampling needs full videos and is therefore not
available through the array interface; affine augmentation is.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import rng as rngmod
from .errors import ValidationError
from .graph import SkeletonSpec, default_tool_skeleton
from .model import (
    DEFAULT_CHANNELS,
    DEFAULT_STRIDES,
    ModelConfig,
    StgcnModel,
    build_adjacency_for,
)
from .numerics import ops
from .trainer import ArraySegmentSource, TrainConfig, train


def check_segment_array(X, num_joints: int | None = None, num_channels: int = 3) -> np.ndarray:
    """Validate and convert a batch of segment tensors.

    Expects shape (N, C, T, V, M) with finite float values; returns a
    float64 array.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 5:
        raise ValidationError(
            f"segment array must be 5-D (N, C, T, V, M), got shape {X.shape}")
    if X.shape[0] < 1:
        raise ValidationError("segment array is empty")
    if X.shape[1] != num_channels:
        raise ValidationError(
            f"expected {num_channels} channels (x, y, confidence), got {X.shape[1]}")
    if num_joints is not None and X.shape[3] != num_joints:
        raise ValidationError(
            f"expected {num_joints} joints, got {X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("segment array contains non-finite values")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValidationError(f"y must have shape ({n_samples},), got {y.shape}")
    return y


class SkeletonGestureClassifier(BaseEstimator, ClassifierMixin):
    """Spatial-temporal graph convolution classifier over tool-pose segments.

    Parameters mirror the training protocol: 30 epochs of SGD at base
    learning rate 0.01, divided by 10 every 10 epochs, weight decay 5e-4,
    and dropout 0.5 before the classification head.

    Parameters
    ----------
    channels, strides : per-unit output channels and temporal strides.
    temporal_kernel : odd temporal kernel size.
    residual, use_batch_norm, input_batch_norm : unit toggles.
    head_dropout, unit_dropout : dropout rates (train time only).
    partition_strategy : "spatial" (K=3 distance partitioning) or
        "uniform" (single A+I partition).
    skeleton : SkeletonSpec, defaults to the 5-joint grasper skeleton.
    epochs, base_lr, lr_step, lr_factor, weight_decay, batch_size,
    momentum : optimizer schedule.
    affine_augment : apply random affine maps to training samples.
    seed : master seed for init, shuffling, augmentation, and dropout.

    Attributes
    ----------
    classes_ : sorted unique labels seen in fit.
    model_ : the fitted StgcnModel.
    history_ : per-epoch training records.
    """

    def __init__(
        self,
        channels=DEFAULT_CHANNELS,
        strides=DEFAULT_STRIDES,
        temporal_kernel=9,
        residual=True,
        use_batch_norm=True,
        input_batch_norm=True,
        head_dropout=0.5,
        unit_dropout=0.0,
        partition_strategy="spatial",
        partition_alpha=1e-3,
        skeleton=None,
        epochs=30,
        base_lr=0.01,
        lr_step=10,
        lr_factor=0.1,
        weight_decay=0.0005,
        batch_size=16,
        momentum=0.0,
        affine_augment=False,
        seed=0,
    ):
        self.channels = channels
        self.strides = strides
        self.temporal_kernel = temporal_kernel
        self.residual = residual
        self.use_batch_norm = use_batch_norm
        self.input_batch_norm = input_batch_norm
        self.head_dropout = head_dropout
        self.unit_dropout = unit_dropout
        self.partition_strategy = partition_strategy
        self.partition_alpha = partition_alpha
        self.skeleton = skeleton
        self.epochs = epochs
        self.base_lr = base_lr
        self.lr_step = lr_step
        self.lr_factor = lr_factor
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.momentum = momentum
        self.affine_augment = affine_augment
        self.seed = seed

    def _skeleton(self) -> SkeletonSpec:
        return self.skeleton if self.skeleton is not None else default_tool_skeleton()

    def fit(self, X, y):
        skeleton = self._skeleton()
        X = check_segment_array(X, num_joints=skeleton.num_joints)
        y = check_labels(y, X.shape[0])
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValidationError("fit needs at least 2 distinct classes")
        model_cfg = ModelConfig(
            num_classes=int(self.classes_.size),
            in_channels=X.shape[1],
            num_joints=X.shape[3],
            num_instances=X.shape[4],
            channels=tuple(self.channels),
            strides=tuple(self.strides),
            temporal_kernel=self.temporal_kernel,
            residual=self.residual,
            use_batch_norm=self.use_batch_norm,
            input_batch_norm=self.input_batch_norm,
            unit_dropout=self.unit_dropout,
            head_dropout=self.head_dropout,
            partition_strategy=self.partition_strategy,
            partition_alpha=self.partition_alpha,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs,
            base_lr=self.base_lr,
            lr_step=self.lr_step,
            lr_factor=self.lr_factor,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            momentum=self.momentum,
            seed=self.seed,
            window=X.shape[2],
            affine_augment=self.affine_augment,
            fragment_mode="off",
        )
        adjacency = build_adjacency_for(model_cfg, skeleton)
        source = ArraySegmentSource(X, y_idx)
        state = train(source, train_cfg, model_cfg, adjacency)
        self.model_ = StgcnModel(model_cfg, state.params, adjacency)
        self.history_ = state.history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_segment_array(X, num_joints=self.model_.config.num_joints)
        return self.model_.predict_logits(X, batch_size=max(self.batch_size, 1))

    def predict_proba(self, X):
        return ops.softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
