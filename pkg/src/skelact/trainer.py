"""Mini-batch SGD training with the step learning-rate schedule.

Determinism contract: epoch shuffling, per-sample augmentation, dropout, and
weight init all draw from PCG64 streams keyed by (seed, tag, epoch, index),
never from a shared stateful stream.  Resuming from a checkpoint therefore
reproduces the uninterrupted trajectory exactly, and batch assembly could
run ahead of the optimization loop without reordering randomness.

Checkpoint container: ``SKGCCKPT`` magic, format version, the parameter
container (including batch-norm buffers), momentum buffers, a JSON tail
with counters, history, and the train config, and a sha256 checksum.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .augment import AffineRanges, fragment_end_candidates, random_affine, sample_affine
from .datapipe import (
    DEFAULT_STEP,
    DEFAULT_WINDOW,
    GestureDataset,
    SegmentTensor,
    extract_window,
    window_to_segment_data,
)
from .errors import NumericalError, ValidationError
from .graph import PartitionedAdjacency
from .model import ModelConfig, StgcnModel, StgcnParams, params_from_bytes, params_to_bytes
from .numerics import Tape, ops

CHECKPOINT_MAGIC = b"SKGCCKPT"
CHECKPOINT_VERSION = 1

FRAGMENT_MODES = ("off", "replace", "supplement")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.01
    lr_step: int = 10
    lr_factor: float = 0.1
    weight_decay: float = 0.0005
    batch_size: int = 16
    momentum: float = 0.0
    seed: int = 0
    window: int = DEFAULT_WINDOW
    step: int = DEFAULT_STEP
    affine_augment: bool = True
    max_angle_deg: float = 10.0
    max_translate: float = 0.1
    scale_low: float = 0.9
    scale_high: float = 1.1
    fragment_mode: str = "supplement"
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr < 0 or self.lr_factor <= 0 or self.lr_step < 1:
            raise ValidationError("learning-rate schedule values out of range")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ValidationError("weight decay and momentum must be >= 0")
        if self.batch_size < 1 or self.window < 1 or self.step < 1:
            raise ValidationError("batch_size, window, and step must be >= 1")
        if self.fragment_mode not in FRAGMENT_MODES:
            raise ValidationError(
                f"fragment_mode must be one of {FRAGMENT_MODES}, got {self.fragment_mode!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    def affine_ranges(self) -> AffineRanges:
        return AffineRanges(self.max_angle_deg, self.max_translate,
                            self.scale_low, self.scale_high)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config key {sorted(unknown)[0]!r}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """base_lr * lr_factor ** floor(epoch / lr_step)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.base_lr * cfg.lr_factor ** (epoch // cfg.lr_step)


def sgd_step(
    params: StgcnParams,
    lr: float,
    weight_decay: float,
    momentum: float,
    momentum_buffers: dict[str, np.ndarray],
) -> None:
    """One SGD update from the gradients accumulated on the parameters.

    g' = g + weight_decay * w (weights only); with momentum m the buffer
    update is v <- m v + g' and w <- w - lr v, reducing to w <- w - lr g'
    at m = 0.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"sgd step aborted: non-finite gradient for {name}")
        if weight_decay and params.decay_applies(name):
            g = g + weight_decay * p.data
        if momentum:
            buf = momentum_buffers.get(name)
            if buf is None:
                buf = np.zeros_like(p.data)
                momentum_buffers[name] = buf
            buf *= momentum
            buf += g
            g = buf
        p.data -= lr * g


@dataclass(frozen=True)
class SegmentRef:
    """Stable identity of one training sample within a source."""

    index: int
    video_id: str
    end_frame: int
    label: int


class ArraySegmentSource:
    """Training data held as a plain (N, C, T, V, M) array with labels.

    Fragment sampling needs full-length source sequences, so it is not
    available through this source.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, label_shuffle_seed: int | None = None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 5:
            raise ValidationError(f"X must be (N, C, T, V, M), got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValidationError(f"y must have {X.shape[0]} entries, got shape {y.shape}")
        self.X = X
        self.y = _maybe_shuffle(y.astype(np.int64), label_shuffle_seed)
        self.supports_fragments = False

    def refs(self) -> list[SegmentRef]:
        return [
            SegmentRef(i, f"sample{i}", 0, int(self.y[i])) for i in range(self.X.shape[0])
        ]

    def window_data(self, ref: SegmentRef) -> np.ndarray:
        return self.X[ref.index]

    def fragment_data(self, ref: SegmentRef, rng) -> np.ndarray:
        raise ValidationError("fragment sampling needs video-backed training data")


class VideoSegmentSource:
    """Training data backed by full videos, enabling fragment sampling."""

    def __init__(
        self,
        dataset: GestureDataset,
        video_ids=None,
        window: int = DEFAULT_WINDOW,
        step: int = DEFAULT_STEP,
        label_shuffle_seed: int | None = None,
    ):
        self.dataset = dataset
        self.window = window
        self.video_ids = sorted(dataset.videos) if video_ids is None else sorted(video_ids)
        self.supports_fragments = True
        segs = dataset.segments(self.video_ids, window=window, step=step)
        labels = _maybe_shuffle(
            np.array([s.label for s in segs], dtype=np.int64), label_shuffle_seed)
        self._refs = [
            SegmentRef(i, s.video_id, s.end_frame, int(labels[i]))
            for i, s in enumerate(segs)
        ]
        self._candidates: dict[tuple[str, int], np.ndarray] = {}

    def refs(self) -> list[SegmentRef]:
        return list(self._refs)

    def window_data(self, ref: SegmentRef) -> np.ndarray:
        vd = self.dataset.videos[ref.video_id]
        return window_to_segment_data(
            extract_window(vd.sequence.frames, ref.end_frame, self.window))

    def fragment_data(self, ref: SegmentRef, rng: np.random.Generator) -> np.ndarray:
        vd = self.dataset.videos[ref.video_id]
        key = (ref.video_id, ref.label)
        cand = self._candidates.get(key)
        if cand is None:
            cand = fragment_end_candidates(
                vd.transcript, self.dataset.vocabulary[ref.label],
                vd.sequence.num_frames)
            self._candidates[key] = cand
        if cand.size == 0:
            return self.window_data(ref)
        end = int(cand[rng.integers(cand.size)])
        return window_to_segment_data(
            extract_window(vd.sequence.frames, end, self.window))


def _maybe_shuffle(labels: np.ndarray, seed: int | None) -> np.ndarray:
    if seed is None:
        return labels
    perm = rngmod.generator(seed).permutation(labels.size)
    return labels[perm]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    train_accuracy: float
    val_accuracy: float | None
    seconds: float


@dataclass
class TrainState:
    params: StgcnParams
    epoch: int = 0
    step: int = 0
    momentum_buffers: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list)
    best_val_accuracy: float | None = None
    best_epoch: int | None = None
    final_train_accuracy: float | None = None


def _materialize(source, ref: SegmentRef, cfg: TrainConfig, epoch: int, role: int):
    """Deterministically build one augmented training sample."""
    rng = rngmod.derived(cfg.seed, role, epoch, ref.index)
    if role == rngmod.ROLE_FRAGMENT:
        data = source.fragment_data(ref, rng)
    else:
        data = source.window_data(ref)
    if cfg.affine_augment:
        seg = SegmentTensor(data, ref.label, ref.video_id, ref.end_frame)
        data = random_affine(seg, sample_affine(rng, cfg.affine_ranges())).data
    return data, ref.label


def _eval_accuracy(model: StgcnModel, source, refs: list[SegmentRef], batch_size: int) -> float:
    if not refs:
        return float("nan")
    correct = 0
    for i in range(0, len(refs), batch_size):
        chunk = refs[i: i + batch_size]
        x = np.stack([source.window_data(r) for r in chunk])
        pred = np.argmax(model.logits(x, training=False).data, axis=1)
        correct += int(np.sum(pred == np.array([r.label for r in chunk])))
    return correct / len(refs)


def train(
    source,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    adjacency: PartitionedAdjacency,
    out_dir=None,
    resume_from=None,
    log=None,
) -> TrainState:
    """Run cfg.epochs passes of shuffled, augmented mini-batch SGD.

    Writes a checkpoint per epoch (plus best.ckpt when a validation split
    is configured) and appends per-epoch metrics to metrics.csv when
    ``out_dir`` is given.  ``log`` is an optional callable for progress
    lines.
    """
    refs = source.refs()
    if not refs:
        raise ValidationError("training needs a non-empty dataset")
    if cfg.fragment_mode != "off" and not source.supports_fragments:
        raise ValidationError(
            "fragment sampling needs video-backed training data; "
            "set fragment_mode='off' for array sources")
    val_refs: list[SegmentRef] = []
    train_refs = refs
    if cfg.val_fraction > 0:
        n_val = max(1, int(round(cfg.val_fraction * len(refs))))
        if n_val >= len(refs):
            raise ValidationError("validation split leaves no training data")
        perm = rngmod.derived(cfg.seed, rngmod.ROLE_VAL_SPLIT).permutation(len(refs))
        val_idx = set(int(i) for i in perm[:n_val])
        val_refs = [refs[i] for i in sorted(val_idx)]
        train_refs = [refs[i] for i in range(len(refs)) if i not in val_idx]

    if resume_from is not None:
        state, saved_cfg = load_checkpoint(resume_from)
        if saved_cfg != cfg:
            raise ValidationError("checkpoint was written with a different train config")
        if state.params.config != model_cfg:
            raise ValidationError("checkpoint was written for a different model config")
    else:
        params = StgcnParams.initialize(
            model_cfg, rngmod.derived(cfg.seed, rngmod.ROLE_INIT))
        state = TrainState(params=params)
    model = StgcnModel(model_cfg, state.params, adjacency)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        if state.epoch == 0 or not metrics_path.exists():
            metrics_path.write_text(
                "epoch,lr,mean_loss,train_accuracy,val_accuracy,seconds\n",
                encoding="utf-8")

    for epoch in range(state.epoch, cfg.epochs):
        started = time.perf_counter()
        lr = lr_at(epoch, cfg)
        stream: list[tuple[SegmentRef, int]] = [
            (r, rngmod.ROLE_WINDOW) for r in train_refs
        ]
        if cfg.fragment_mode == "replace":
            stream = [(r, rngmod.ROLE_FRAGMENT) for r in train_refs]
        elif cfg.fragment_mode == "supplement":
            stream = stream + [(r, rngmod.ROLE_FRAGMENT) for r in train_refs]
        order = rngmod.derived(cfg.seed, rngmod.ROLE_SHUFFLE, epoch).permutation(len(stream))
        loss_sum = 0.0
        correct = 0
        seen = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch_idx = b0 // cfg.batch_size
            picks = [stream[i] for i in order[b0: b0 + cfg.batch_size]]
            xs, ys = [], []
            for ref, role in picks:
                data, label = _materialize(source, ref, cfg, epoch, role)
                xs.append(data)
                ys.append(label)
            x = np.stack(xs)
            y = np.array(ys, dtype=np.int64)
            drop_rng = rngmod.derived(cfg.seed, rngmod.ROLE_DROPOUT, epoch, batch_idx)
            with Tape() as tape:
                for p in state.params.tensors.values():
                    tape.watch(p)
                logits = model.logits(x, training=True, rng=drop_rng)
                loss = ops.softmax_cross_entropy(logits, y)
                tape.backward(loss)
            sgd_step(state.params, lr, cfg.weight_decay, cfg.momentum,
                     state.momentum_buffers)
            loss_sum += float(loss.data) * len(picks)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            seen += len(picks)
            state.step += 1
        state.epoch = epoch + 1
        val_acc = None
        if val_refs:
            val_acc = _eval_accuracy(model, source, val_refs, cfg.batch_size)
            if state.best_val_accuracy is None or val_acc > state.best_val_accuracy:
                state.best_val_accuracy = val_acc
                state.best_epoch = state.epoch
                if out_dir is not None:
                    save_checkpoint(state, cfg, out_dir / "best.ckpt")
        record = EpochRecord(
            epoch=state.epoch,
            lr=lr,
            mean_loss=loss_sum / seen,
            train_accuracy=correct / seen,
            val_accuracy=val_acc,
            seconds=time.perf_counter() - started,
        )
        state.history.append(record)
        if out_dir is not None:
            with open(out_dir / "metrics.csv", "a", encoding="utf-8") as fh:
                val_field = "" if val_acc is None else repr(val_acc)
                fh.write(
                    f"{record.epoch},{record.lr!r},{record.mean_loss!r},"
                    f"{record.train_accuracy!r},{val_field},{record.seconds!r}\n")
            save_checkpoint(state, cfg, out_dir / f"epoch_{state.epoch:03d}.ckpt")
        if log is not None:
            log(
                f"epoch {record.epoch}/{cfg.epochs} lr {record.lr:g} "
                f"loss {record.mean_loss:.4f} acc {record.train_accuracy:.3f}"
                + (f" val {val_acc:.3f}" if val_acc is not None else "")
            )
    state.final_train_accuracy = _eval_accuracy(model, source, train_refs, cfg.batch_size)
    return state


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    buf = io.BytesIO()
    params_blob = params_to_bytes(state.params)
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(params_blob)))
    buf.write(params_blob)
    buf.write(struct.pack("<I", len(state.momentum_buffers)))
    for name, arr in state.momentum_buffers.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tail = json.dumps(
        {
            "epoch": state.epoch,
            "step": state.step,
            "history": [asdict(r) for r in state.history],
            "best_val_accuracy": state.best_val_accuracy,
            "best_epoch": state.best_epoch,
            "train_config": cfg.to_dict(),
        },
        sort_keys=True,
    ).encode()
    buf.write(struct.pack("<I", len(tail)))
    buf.write(tail)
    payload = buf.getvalue()
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 44:
        raise ValidationError(f"{path}: not a checkpoint file")
    payload, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise ValidationError(f"{path}: checksum mismatch, checkpoint is corrupted")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise ValidationError(f"{path}: truncated checkpoint")
        out = payload[off: off + n]
        off += n
        return out

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValidationError(
            f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    (params_len,) = struct.unpack("<Q", take(8))
    params = params_from_bytes(take(params_len), path=path)
    (n_mom,) = struct.unpack("<I", take(4))
    momentum = {}
    for _ in range(n_mom):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        momentum[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
    (tail_len,) = struct.unpack("<I", take(4))
    tail = json.loads(take(tail_len).decode())
    cfg = TrainConfig.from_dict(tail["train_config"])
    state = TrainState(
        params=params,
        epoch=int(tail["epoch"]),
        step=int(tail["step"]),
        momentum_buffers=momentum,
        history=[EpochRecord(**r) for r in tail["history"]],
        best_val_accuracy=tail["best_val_accuracy"],
        best_epoch=tail["best_epoch"],
    )
    return state, cfg
