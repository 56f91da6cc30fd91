"""Training-time augmentation of skeleton sequences.

Both transforms preserve the sample's label and tensor shape, and all
randomness comes from the generator handed in, so an augmentation stream is
reproducible from its seeds.  Evaluation always uses untouched segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .datapipe import SegmentTensor, Transcript, extract_window, window_to_segment_data
from .errors import ValidationError


@dataclass(frozen=True)
class AffineParams:
    """One sampled affine map: rotate about the origin, scale, translate."""

    angle: float        # radians
    translate_x: float  # normalized units
    translate_y: float
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")


IDENTITY_AFFINE = AffineParams(0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class AffineRanges:
    """Sampling ranges; defaults are small enough to preserve gesture
    semantics and all are configurable."""

    max_angle_deg: float = 10.0
    max_translate: float = 0.1
    scale_low: float = 0.9
    scale_high: float = 1.1

    def __post_init__(self):
        if self.max_angle_deg < 0 or self.max_translate < 0:
            raise ValidationError("augmentation ranges must be non-negative")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValidationError(
                f"scale range must satisfy 0 < low <= high, got "
                f"[{self.scale_low}, {self.scale_high}]")


def sample_affine(rng: np.random.Generator, ranges: AffineRanges = AffineRanges()) -> AffineParams:
    angle = math.radians(rng.uniform(-ranges.max_angle_deg, ranges.max_angle_deg))
    tx = rng.uniform(-ranges.max_translate, ranges.max_translate)
    ty = rng.uniform(-ranges.max_translate, ranges.max_translate)
    scale = rng.uniform(ranges.scale_low, ranges.scale_high)
    return AffineParams(angle, tx, ty, scale)


def apply_affine_to_coords(xy: np.ndarray, params: AffineParams) -> np.ndarray:
    """Apply rotate-scale-translate to an (..., 2) coordinate array."""
    c, s = math.cos(params.angle), math.sin(params.angle)
    x = xy[..., 0]
    y = xy[..., 1]
    out = np.empty_like(xy)
    out[..., 0] = params.scale * (c * x - s * y) + params.translate_x
    out[..., 1] = params.scale * (s * x + c * y) + params.translate_y
    return out


def random_affine(seg: SegmentTensor, params: AffineParams) -> SegmentTensor:
    """Apply one affine map to the (x, y) channels of every frame, joint,
    and tool instance; the confidence channel and label are untouched."""
    data = seg.data.copy()
    c, s = math.cos(params.angle), math.sin(params.angle)
    x = data[0]
    y = data[1]
    data[0] = params.scale * (c * x - s * y) + params.translate_x
    data[1] = params.scale * (s * x + c * y) + params.translate_y
    return replace(seg, data=data)


def fragment_end_candidates(transcript: Transcript, label: str, num_frames: int) -> np.ndarray:
    """All frames of the video that carry the given gesture label."""
    frames = []
    for e in transcript.entries:
        if e.label == label:
            frames.extend(range(e.start_frame, min(e.end_frame, num_frames - 1) + 1))
    return np.asarray(frames, dtype=np.int64)


def random_fragment(
    frames: np.ndarray,
    candidates: np.ndarray,
    window: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    """A contiguous ``window``-frame fragment whose end frame is drawn
    uniformly from ``candidates``; short histories are front-padded with
    copies of frame 0, the same rule segmentation uses.

    Returns the (T, M, V, 3) fragment and the chosen end frame.
    """
    if candidates.size == 0:
        raise ValidationError("no frames share the requested gesture label")
    end = int(candidates[rng.integers(candidates.size)])
    return extract_window(frames, end, window), end


def fragment_segment(
    seg: SegmentTensor,
    video_frames: np.ndarray,
    transcript: Transcript,
    vocabulary: tuple[str, ...],
    window: int,
    rng: np.random.Generator,
) -> SegmentTensor:
    """Resample a segment as a random fragment with the same gesture label."""
    label_name = vocabulary[seg.label]
    candidates = fragment_end_candidates(transcript, label_name, video_frames.shape[0])
    fragment, end = random_fragment(video_frames, candidates, window, rng)
    return SegmentTensor(
        data=window_to_segment_data(fragment),
        label=seg.label,
        video_id=seg.video_id,
        end_frame=end,
    )
