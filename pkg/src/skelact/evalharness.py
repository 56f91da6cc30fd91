"""Leave-one-user-out cross-validation and report emission.

Each fold trains a fresh model on the other subjects' videos and predicts
one gesture per step-3 end frame of the held-out subject's videos, with no
augmentation and no smoothing.  Argmax ties break toward the lowest class
index.  The report carries per-fold accuracies, their unweighted mean, and
a pooled (segment-weighted) accuracy for transparency.

Emitted files: ``report.json`` (machine readable), ``predictions.csv``
(one row per evaluated segment), and one ``confusion_<subject>.svg`` per
fold.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .datapipe import GestureDataset, build_louo_folds
from .errors import SkelactError, ValidationError
from .graph import PartitionedAdjacency
from .model import ModelConfig, StgcnModel
from .trainer import TrainConfig, VideoSegmentSource, train

PREDICTION_COLUMNS = ("subject", "video_id", "end_frame", "true_label", "pred_label")


@dataclass
class PredictionRow:
    video_id: str
    end_frame: int
    true_label: int
    pred_label: int


@dataclass
class FoldResult:
    subject_id: str
    predictions: list[PredictionRow]
    accuracy: float
    confusion: np.ndarray  # (num_classes, num_classes), rows are true labels

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "predictions": [asdict(p) for p in self.predictions],
            "accuracy": self.accuracy,
            "confusion": self.confusion.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        return cls(
            subject_id=d["subject_id"],
            predictions=[PredictionRow(**p) for p in d["predictions"]],
            accuracy=d["accuracy"],
            confusion=np.asarray(d["confusion"], dtype=np.int64),
        )


@dataclass
class FoldFailure:
    subject_id: str
    error: str


@dataclass
class CrossvalReport:
    folds: list[FoldResult]
    failures: list[FoldFailure]
    average_accuracy: float | None     # unweighted mean over folds; None on failure
    pooled_accuracy: float | None      # segment-weighted, for transparency
    chance_baseline: float
    vocabulary: tuple[str, ...]
    seed: int
    model_config_digest: str
    train_config: dict
    seconds: float

    def to_dict(self) -> dict:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "failures": [asdict(f) for f in self.failures],
            "average_accuracy": self.average_accuracy,
            "pooled_accuracy": self.pooled_accuracy,
            "chance_baseline": self.chance_baseline,
            "vocabulary": list(self.vocabulary),
            "seed": self.seed,
            "model_config_digest": self.model_config_digest,
            "train_config": self.train_config,
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CrossvalReport":
        return cls(
            folds=[FoldResult.from_dict(f) for f in d["folds"]],
            failures=[FoldFailure(**f) for f in d["failures"]],
            average_accuracy=d["average_accuracy"],
            pooled_accuracy=d["pooled_accuracy"],
            chance_baseline=d["chance_baseline"],
            vocabulary=tuple(d["vocabulary"]),
            seed=d["seed"],
            model_config_digest=d["model_config_digest"],
            train_config=d["train_config"],
            seconds=d["seconds"],
        )


def evaluate_fold(
    model: StgcnModel,
    dataset: GestureDataset,
    video_ids,
    subject_id: str,
    window: int = 90,
    step: int = 3,
    batch_size: int = 64,
) -> FoldResult:
    """Deterministic eval-mode predictions over the given videos."""
    segs = dataset.segments(sorted(video_ids), window=window, step=step)
    if not segs:
        raise ValidationError(f"fold {subject_id}: empty test set")
    n_classes = dataset.num_classes
    predictions = []
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i in range(0, len(segs), batch_size):
        chunk = segs[i: i + batch_size]
        logits = model.logits(np.stack([s.data for s in chunk]), training=False).data
        preds = np.argmax(logits, axis=1)  # ties resolve to the lowest index
        for s, p in zip(chunk, preds):
            predictions.append(PredictionRow(s.video_id, s.end_frame, s.label, int(p)))
            confusion[s.label, int(p)] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())
    return FoldResult(subject_id, predictions, accuracy, confusion)


def fold_seed(base_seed: int, fold_index: int) -> int:
    """A per-fold training seed, stable under fold parallelism."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(100, fold_index))
    return int(ss.generate_state(1)[0])


def _run_fold(
    dataset: GestureDataset,
    fold,
    fold_index: int,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    adjacency: PartitionedAdjacency,
    label_shuffle_seed: int | None,
) -> FoldResult:
    test_set = set(fold.test_videos)
    if test_set & set(fold.train_videos):
        raise SkelactError(
            f"fold {fold.subject_id}: train/test video sets overlap")
    source = VideoSegmentSource(
        dataset, fold.train_videos, window=cfg.window, step=cfg.step,
        label_shuffle_seed=label_shuffle_seed,
    )
    # video-id audit: nothing from the held-out subject may enter training
    held_out = {e.video_id for e in dataset.entries if e.subject_id == fold.subject_id}
    leaked = held_out & set(source.video_ids)
    if leaked:
        raise SkelactError(
            f"fold {fold.subject_id}: held-out videos {sorted(leaked)} leaked "
            f"into the training stream")
    per_fold_cfg = replace(cfg, seed=fold_seed(cfg.seed, fold_index))
    state = train(source, per_fold_cfg, model_cfg, adjacency)
    model = StgcnModel(model_cfg, state.params, adjacency)
    return evaluate_fold(
        model, dataset, fold.test_videos, fold.subject_id,
        window=cfg.window, step=cfg.step,
    )


def crossval(
    dataset: GestureDataset,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    adjacency: PartitionedAdjacency,
    subjects=None,
    jobs: int = 1,
    label_shuffle_seed: int | None = None,
    log=None,
) -> CrossvalReport:
    """Train and evaluate every leave-one-user-out fold.

    ``subjects`` restricts the run to the named held-out subjects.  A fold
    that raises is recorded as a failure and the average is withheld.
    ``label_shuffle_seed`` permutes the training labels (the shuffled-label
    control); test labels stay truthful.
    """
    started = time.perf_counter()
    plan = build_louo_folds(dataset.entries)
    folds = list(enumerate(plan.folds))
    if subjects is not None:
        wanted = set(subjects)
        unknown = wanted - {f.subject_id for _, f in folds}
        if unknown:
            raise ValidationError(f"unknown subject {sorted(unknown)[0]!r}")
        folds = [(i, f) for i, f in folds if f.subject_id in wanted]
    results: list[FoldResult] = []
    failures: list[FoldFailure] = []

    def handle(fold, outcome, error=None):
        if error is not None:
            failures.append(FoldFailure(fold.subject_id, str(error)))
            if log is not None:
                log(f"fold {fold.subject_id}: FAILED ({error})")
        else:
            results.append(outcome)
            if log is not None:
                log(f"fold {fold.subject_id}: accuracy {outcome.accuracy:.4f}")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                (f, pool.submit(_run_fold, dataset, f, i, cfg, model_cfg,
                                adjacency, label_shuffle_seed))
                for i, f in folds
            ]
            for f, fut in futures:
                try:
                    handle(f, fut.result())
                except Exception as exc:
                    handle(f, None, exc)
    else:
        for i, f in folds:
            try:
                handle(f, _run_fold(dataset, f, i, cfg, model_cfg,
                                    adjacency, label_shuffle_seed))
            except Exception as exc:
                handle(f, None, exc)

    average = None
    pooled = None
    if not failures and results:
        average = float(np.mean([r.accuracy for r in results]))
        total = sum(len(r.predictions) for r in results)
        correct = sum(int(np.trace(r.confusion)) for r in results)
        pooled = correct / total
    return CrossvalReport(
        folds=results,
        failures=failures,
        average_accuracy=average,
        pooled_accuracy=pooled,
        chance_baseline=1.0 / dataset.num_classes,
        vocabulary=dataset.vocabulary,
        seed=cfg.seed,
        model_config_digest=model_cfg.digest(),
        train_config=cfg.to_dict(),
        seconds=time.perf_counter() - started,
    )


def write_predictions_csv(report: CrossvalReport, path) -> None:
    vocab = report.vocabulary
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(PREDICTION_COLUMNS) + "\n")
        for fold in report.folds:
            for p in fold.predictions:
                fh.write(
                    f"{fold.subject_id},{p.video_id},{p.end_frame},"
                    f"{vocab[p.true_label]},{vocab[p.pred_label]}\n")


def confusion_figure(confusion: np.ndarray, vocabulary, subject_id: str, path) -> None:
    """Render one fold's confusion matrix as an SVG."""
    from matplotlib.figure import Figure

    n = confusion.shape[0]
    fig = Figure(figsize=(5.5, 5.0))
    ax = fig.add_subplot(111)
    row_sums = confusion.sum(axis=1, keepdims=True)
    shades = confusion / np.maximum(row_sums, 1)
    ax.imshow(shades, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n), labels=vocabulary, rotation=45)
    ax.set_yticks(range(n), labels=vocabulary)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"held-out subject {subject_id}")
    for i in range(n):
        for j in range(n):
            if confusion[i, j]:
                ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center",
                        fontsize=7, color="black" if shades[i, j] < 0.5 else "white")
    fig.tight_layout()
    fig.savefig(path, format="svg")


def emit_report(report: CrossvalReport, out_dir) -> list[Path]:
    """Write report.json, predictions.csv, and per-fold confusion SVGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    report_path = out_dir / "report.json"
    report_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(report_path)
    pred_path = out_dir / "predictions.csv"
    write_predictions_csv(report, pred_path)
    written.append(pred_path)
    for fold in report.folds:
        fig_path = out_dir / f"confusion_{fold.subject_id}.svg"
        confusion_figure(fold.confusion, report.vocabulary, fold.subject_id, fig_path)
        written.append(fig_path)
    return written


def load_report(path) -> CrossvalReport:
    return CrossvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
