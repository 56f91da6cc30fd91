"""Pose/transcript ingestion, sliding-window segmentation, and fold plans.

On-disk formats (all UTF-8, LF line endings):

Pose file
    CSV with header ``video_id,frame,tool,joint,x,y,confidence``.  Rows must
    form a complete grid over frames 0..F-1, tools 0..M-1, joints 0..V-1.
    Coordinates are pixels; confidence is the detector score in [0, 1].

Transcript file
    Whitespace-separated ``start_frame end_frame label`` lines (the JIGSAWS
    transcription layout), frame ranges inclusive, non-overlapping, sorted.

Manifest file
    CSV with header ``video_id,subject_id,task,pose_path,transcript_path,
    image_width,image_height``.  Paths are relative to the manifest's
    directory.  Image dimensions live here because pose files carry raw
    pixel coordinates.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError

# Gesture vocabulary of the Suturing task: 10 of the 15 gesture labels occur.
SUTURING_GESTURES = ("G1", "G2", "G3", "G4", "G5", "G6", "G8", "G9", "G10", "G11")

POSE_COLUMNS = ("video_id", "frame", "tool", "joint", "x", "y", "confidence")
MANIFEST_COLUMNS = (
    "video_id", "subject_id", "task", "pose_path", "transcript_path",
    "image_width", "image_height",
)

DEFAULT_WINDOW = 90   # frames per segment (3 s at 30 fps)
DEFAULT_STEP = 3      # label every 3 frames (10 labels per second)
DEFAULT_FRAME_RATE = 30.0


@dataclass
class PoseSequence:
    """Per-video joint coordinates: frames of shape (F, M, V, 3) holding
    (x, y, confidence) per tool instance and joint."""

    video_id: str
    frames: np.ndarray
    image_width: int
    image_height: int
    subject_id: str | None = None
    frame_rate: float = DEFAULT_FRAME_RATE
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValidationError(
                f"{self.video_id}: frames must be (F, M, V, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{self.video_id}: non-finite pose values")
        conf = arr[:, :, :, 2]
        if conf.min() < 0.0 or conf.max() > 1.0:
            raise ValidationError(f"{self.video_id}: confidence outside [0, 1]")
        self.frames = arr

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_tools(self) -> int:
        return self.frames.shape[1]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class TranscriptEntry:
    start_frame: int
    end_frame: int
    label: str


@dataclass
class Transcript:
    """Non-overlapping labeled frame ranges for one video."""

    video_id: str
    entries: tuple[TranscriptEntry, ...]

    def __post_init__(self):
        prev_end = None
        for e in self.entries:
            if e.start_frame > e.end_frame:
                raise ValidationError(
                    f"{self.video_id}: entry {e.label} has start {e.start_frame} "
                    f"after end {e.end_frame}")
            if prev_end is not None and e.start_frame <= prev_end:
                raise ValidationError(
                    f"{self.video_id}: overlapping entries at frame {e.start_frame}")
            prev_end = e.end_frame

    def gesture_at(self, frame: int) -> str | None:
        for e in self.entries:
            if e.start_frame <= frame <= e.end_frame:
                return e.label
            if e.start_frame > frame:
                break
        return None


@dataclass
class SegmentTensor:
    """One sample: data (C=3, T, V, M) with the gesture class at the final
    window frame."""

    data: np.ndarray
    label: int
    video_id: str
    end_frame: int


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    subject_id: str
    task: str
    pose_path: str
    transcript_path: str
    image_width: int
    image_height: int


@dataclass(frozen=True)
class Fold:
    subject_id: str
    test_videos: tuple[str, ...]
    train_videos: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]


def load_pose_file(
    path,
    image_width: int,
    image_height: int,
    subject_id: str | None = None,
) -> PoseSequence:
    """Parse and validate a pose CSV into a PoseSequence.

    The file must contain every (frame, tool, joint) cell exactly once;
    the first missing cell is named in the error.
    """
    path = Path(path)
    if image_width <= 0 or image_height <= 0:
        raise ValidationError(f"{path}: image dimensions must be positive")
    cells: dict[tuple[int, int, int], tuple[float, float, float]] = {}
    video_id = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != POSE_COLUMNS:
            raise ValidationError(
                f"{path}: expected header {','.join(POSE_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(POSE_COLUMNS):
                raise ValidationError(f"{path}:{lineno}: expected {len(POSE_COLUMNS)} fields")
            vid = row[0]
            try:
                frame, tool, joint = int(row[1]), int(row[2]), int(row[3])
                x, y, conf = float(row[4]), float(row[5]), float(row[6])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed numeric field") from exc
            if video_id is None:
                video_id = vid
            elif vid != video_id:
                raise ValidationError(
                    f"{path}:{lineno}: mixed video ids {video_id!r} and {vid!r}")
            if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(conf)):
                raise ValidationError(
                    f"{path}:{lineno}: non-finite value at frame {frame}, "
                    f"tool {tool}, joint {joint}")
            if not 0.0 <= conf <= 1.0:
                raise ValidationError(
                    f"{path}:{lineno}: confidence {conf} outside [0, 1] at "
                    f"frame {frame}, tool {tool}, joint {joint}")
            key = (frame, tool, joint)
            if key in cells:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate cell at frame {frame}, "
                    f"tool {tool}, joint {joint}")
            cells[key] = (x, y, conf)
    if not cells:
        raise ValidationError(f"{path}: no pose rows")
    num_frames = max(k[0] for k in cells) + 1
    num_tools = max(k[1] for k in cells) + 1
    num_joints = max(k[2] for k in cells) + 1
    frames = np.empty((num_frames, num_tools, num_joints, 3))
    for f in range(num_frames):
        for m in range(num_tools):
            for j in range(num_joints):
                cell = cells.get((f, m, j))
                if cell is None:
                    raise ValidationError(
                        f"{path}: missing cell at frame {f}, tool {m}, joint {j}")
                frames[f, m, j] = cell
    return PoseSequence(
        video_id=video_id,
        frames=frames,
        image_width=int(image_width),
        image_height=int(image_height),
        subject_id=subject_id,
    )


def write_pose_file(seq: PoseSequence, path) -> None:
    """Write the pose CSV; float fields use repr so a round trip is exact."""
    if seq.normalized:
        raise ValidationError("pose files store raw pixel coordinates; got a normalized sequence")
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(POSE_COLUMNS) + "\n")
        for f in range(seq.num_frames):
            for m in range(seq.num_tools):
                for j in range(seq.num_joints):
                    x, y, conf = seq.frames[f, m, j]
                    fh.write(
                        f"{seq.video_id},{f},{m},{j},"
                        f"{float(x)!r},{float(y)!r},{float(conf)!r}\n")


def load_transcript(
    path,
    vocabulary: tuple[str, ...] = SUTURING_GESTURES,
    index_base: int = 0,
) -> Transcript:
    """Parse a transcript; rejects overlaps and out-of-vocabulary labels.

    ``index_base`` shifts the file's frame numbers down by that amount so
    datasets with 1-based transcripts align with 0-based pose frames.
    """
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 3:
                raise ValidationError(
                    f"{path}:{lineno}: expected 'start_frame end_frame label'")
            try:
                start, end = int(fields[0]) - index_base, int(fields[1]) - index_base
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed frame number") from exc
            label = fields[2]
            if label not in vocabulary:
                raise ValidationError(
                    f"{path}:{lineno}: label {label!r} not in the configured vocabulary")
            if start > end:
                raise ValidationError(f"{path}:{lineno}: start frame after end frame")
            entries.append(TranscriptEntry(start, end, label))
    entries.sort(key=lambda e: e.start_frame)
    for prev, cur in zip(entries, entries[1:]):
        if cur.start_frame <= prev.end_frame:
            raise ValidationError(
                f"{path}: overlapping entries around frame {cur.start_frame}")
    return Transcript(video_id=path.stem, entries=tuple(entries))


def write_transcript(transcript: Transcript, path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        for e in transcript.entries:
            fh.write(f"{e.start_frame} {e.end_frame} {e.label}\n")


def normalize_coords(seq: PoseSequence) -> PoseSequence:
    """Map x to 2x/width - 1 and y to 2y/height - 1; confidence unchanged.

    Applying this twice would rescale coordinates that are already in
    [-1, 1], so a second call on the same sequence is rejected.
    """
    if seq.normalized:
        raise ValidationError(f"{seq.video_id}: sequence is already normalized")
    if seq.image_width <= 0 or seq.image_height <= 0:
        raise ValidationError(f"{seq.video_id}: image dimensions must be positive")
    frames = seq.frames.copy()
    frames[:, :, :, 0] = 2.0 * frames[:, :, :, 0] / seq.image_width - 1.0
    frames[:, :, :, 1] = 2.0 * frames[:, :, :, 1] / seq.image_height - 1.0
    return replace(seq, frames=frames, normalized=True)


def extract_window(frames: np.ndarray, end_frame: int, window: int) -> np.ndarray:
    """The ``window`` frames ending at ``end_frame`` (inclusive), front-padded
    with copies of frame 0 when the window starts before the sequence."""
    if not 0 <= end_frame < frames.shape[0]:
        raise ValidationError(
            f"end frame {end_frame} outside the {frames.shape[0]}-frame sequence")
    start = end_frame - window + 1
    if start >= 0:
        return frames[start: end_frame + 1]
    pad = np.repeat(frames[:1], -start, axis=0)
    return np.concatenate([pad, frames[: end_frame + 1]], axis=0)


def window_to_segment_data(window: np.ndarray) -> np.ndarray:
    """(T, M, V, 3) window -> (C=3, T, V, M) sample tensor."""
    return np.ascontiguousarray(window.transpose(3, 0, 2, 1))


def segment(
    seq: PoseSequence,
    transcript: Transcript,
    window: int = DEFAULT_WINDOW,
    step: int = DEFAULT_STEP,
    vocabulary: tuple[str, ...] = SUTURING_GESTURES,
) -> list[SegmentTensor]:
    """Sliding-window samples: one segment per end frame in {0, step, ...}
    whose gesture is transcribed; untranscribed end frames are skipped."""
    if not seq.normalized:
        raise ValidationError(f"{seq.video_id}: normalize coordinates before segmenting")
    if window < 1 or step < 1:
        raise ValidationError(f"window and step must be >= 1, got {window} and {step}")
    out = []
    for end in range(0, seq.num_frames, step):
        gesture = transcript.gesture_at(end)
        if gesture is None:
            continue
        data = window_to_segment_data(extract_window(seq.frames, end, window))
        out.append(
            SegmentTensor(
                data=data,
                label=vocabulary.index(gesture),
                video_id=seq.video_id,
                end_frame=end,
            )
        )
    return out


def write_manifest(entries: list[VideoEntry], path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(MANIFEST_COLUMNS) + "\n")
        for e in entries:
            fh.write(
                f"{e.video_id},{e.subject_id},{e.task},{e.pose_path},"
                f"{e.transcript_path},{e.image_width},{e.image_height}\n"
            )


def load_manifest(path) -> list[VideoEntry]:
    path = Path(path)
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ValidationError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValidationError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields")
            try:
                entries.append(
                    VideoEntry(row[0], row[1], row[2], row[3], row[4], int(row[5]), int(row[6]))
                )
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed image dimension") from exc
    if not entries:
        raise ValidationError(f"{path}: empty manifest")
    ids = [e.video_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate video ids")
    return entries


@dataclass
class VideoData:
    sequence: PoseSequence     # normalized
    transcript: Transcript


class GestureDataset:
    """All videos of a manifest, loaded, validated, and normalized."""

    def __init__(
        self,
        entries: list[VideoEntry],
        videos: dict[str, VideoData],
        vocabulary: tuple[str, ...],
    ):
        self.entries = entries
        self.videos = videos
        self.vocabulary = vocabulary

    @property
    def num_classes(self) -> int:
        return len(self.vocabulary)

    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})

    def subject_of(self, video_id: str) -> str:
        for e in self.entries:
            if e.video_id == video_id:
                return e.subject_id
        raise ValidationError(f"video {video_id!r} not in the manifest")

    def segments(
        self,
        video_ids=None,
        window: int = DEFAULT_WINDOW,
        step: int = DEFAULT_STEP,
    ) -> list[SegmentTensor]:
        ids = sorted(self.videos) if video_ids is None else list(video_ids)
        out = []
        for vid in ids:
            vd = self.videos[vid]
            out.extend(segment(vd.sequence, vd.transcript, window, step, self.vocabulary))
        return out


def load_dataset(
    manifest_path,
    vocabulary: tuple[str, ...] = SUTURING_GESTURES,
    index_base: int = 0,
) -> GestureDataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.csv"
    entries = load_manifest(manifest_path)
    root = manifest_path.parent
    videos = {}
    for e in entries:
        seq = load_pose_file(
            root / e.pose_path, e.image_width, e.image_height, subject_id=e.subject_id
        )
        if seq.video_id != e.video_id:
            raise ValidationError(
                f"{e.pose_path}: video id {seq.video_id!r} does not match "
                f"manifest entry {e.video_id!r}")
        transcript = load_transcript(root / e.transcript_path, vocabulary, index_base)
        videos[e.video_id] = VideoData(normalize_coords(seq), transcript)
    return GestureDataset(entries, videos, vocabulary)


def build_louo_folds(entries: list[VideoEntry]) -> FoldPlan:
    """Leave-one-user-out folds: one per subject, holding out all of that
    subject's videos.  Eight subjects is the expected layout; any other
    count warns and generalizes to one fold per subject."""
    by_subject: dict[str, list[str]] = {}
    for e in entries:
        by_subject.setdefault(e.subject_id, []).append(e.video_id)
    subjects = sorted(by_subject)
    if len(subjects) < 2:
        raise ValidationError("leave-one-user-out needs at least 2 subjects")
    if len(subjects) != 8:
        warnings.warn(
            f"expected 8 subjects for the standard split, got {len(subjects)}; "
            f"building {len(subjects)} folds",
            stacklevel=2,
        )
    all_videos = sorted(e.video_id for e in entries)
    folds = []
    for s in subjects:
        test = tuple(sorted(by_subject[s]))
        train = tuple(v for v in all_videos if v not in set(test))
        folds.append(Fold(subject_id=s, test_videos=test, train_videos=train))
    return FoldPlan(folds=tuple(folds))
