"""Synthetic pose/transcript datasets for desk-scale runs.

Each gesture class is a distinct parametric motion of the 5-joint tool
skeleton: the effectors open and close with a class-specific frequency,
amplitude, and phase around a class-specific resting asymmetry, while the
arm base drifts slowly.  Subjects add reproducible structural noise (limb
length scale, orientation bias, tremor level) on top of the class pattern.

Every video visits each class once, in a seeded random order.  Transcripts
label only the trailing portion of each dwell so that every labeled window
is dominated by its end gesture; the untranscribed lead-in frames are
skipped by segmentation, mirroring real transcripts that do not cover all
frames.

File bytes are a pure function of the seed: floats are written with repr
and all randomness comes from PCG64 streams keyed by (seed, subject,
trial).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .datapipe import (
    DEFAULT_FRAME_RATE,
    SUTURING_GESTURES,
    PoseSequence,
    Transcript,
    TranscriptEntry,
    VideoEntry,
    write_manifest,
    write_pose_file,
    write_transcript,
)
from .errors import ValidationError

VOCAB_FILENAME = "gestures.txt"

_SUBJECT_STREAM = 11
_TRIAL_STREAM = 12


def _class_params(g: int, classes: int) -> dict:
    """Deterministic per-class motion signature.

    The amplitude ladder is deliberately wide so classes differ strongly in
    how far the effectors open, on top of distinct frequencies and phases.
    """
    return {
        "freq": 0.4 + 0.22 * ((3 * g) % 10),         # effector oscillation, Hz
        "amp": 0.10 + 0.07 * g,                      # oscillation amplitude, rad
        "phase": 2.0 * math.pi * g / max(classes, 1),
        "asym": 0.5 * ((7 * g) % 10) / 10.0 - 0.22,  # resting effector asymmetry, rad
        "sway_freq": 0.25 + 0.11 * ((5 * g) % 9),    # shaft orientation sway, Hz
        "sway_amp": 0.06 + 0.04 * (g % 5),
    }


def _subject_params(seed: int, subject_index: int) -> dict:
    r = rngmod.derived(seed, _SUBJECT_STREAM, subject_index)
    return {
        "limb_scale": 1.0 + r.uniform(-0.07, 0.07),
        "angle_bias": r.uniform(-0.1, 0.1),
        "tremor": r.uniform(1.0, 2.0),               # pixels
    }


def _render_video(
    rng: np.random.Generator,
    order: np.ndarray,
    classes: int,
    tools: int,
    frames_per_gesture: int,
    subject: dict,
    width: int,
    height: int,
    frame_rate: float,
) -> np.ndarray:
    num_frames = frames_per_gesture * len(order)
    frames = np.empty((num_frames, tools, 5, 3))
    d1 = 60.0 * subject["limb_scale"]
    d2 = 55.0 * subject["limb_scale"]
    d3 = 35.0 * subject["limb_scale"]
    anchors = [
        (0.35 * width, 0.5 * height),
        (0.65 * width, 0.5 * height),
    ]
    base_angle = [math.pi / 2, math.pi / 2]
    drift_phase = rng.uniform(0.0, 2.0 * math.pi, size=tools)
    for t in range(num_frames):
        g = int(order[t // frames_per_gesture])
        p = _class_params(g, classes)
        tt = t / frame_rate
        for m in range(tools):
            ax, ay = anchors[m % len(anchors)]
            bx = ax + 18.0 * math.cos(2.0 * math.pi * 0.2 * tt + drift_phase[m])
            by = ay + 18.0 * math.sin(2.0 * math.pi * 0.2 * tt + drift_phase[m])
            theta = (
                base_angle[m % 2]
                + subject["angle_bias"]
                + p["sway_amp"] * math.sin(2.0 * math.pi * p["sway_freq"] * tt + p["phase"])
            )
            spread = 0.5 + p["asym"] + p["amp"] * math.sin(
                2.0 * math.pi * p["freq"] * tt + p["phase"] + m * 0.7
            )
            wx = bx + d1 * math.cos(theta)
            wy = by + d1 * math.sin(theta)
            sx = wx + d2 * math.cos(theta)
            sy = wy + d2 * math.sin(theta)
            ea = (sx + d3 * math.cos(theta - spread), sy + d3 * math.sin(theta - spread))
            eb = (sx + d3 * math.cos(theta + spread), sy + d3 * math.sin(theta + spread))
            frames[t, m, 0] = (bx, by, 0.0)
            frames[t, m, 1] = (wx, wy, 0.0)
            frames[t, m, 2] = (sx, sy, 0.0)
            frames[t, m, 3] = (*ea, 0.0)
            frames[t, m, 4] = (*eb, 0.0)
    frames[:, :, :, 0] += rng.normal(0.0, subject["tremor"], size=(num_frames, tools, 5))
    frames[:, :, :, 1] += rng.normal(0.0, subject["tremor"], size=(num_frames, tools, 5))
    frames[:, :, :, 0] = np.clip(frames[:, :, :, 0], 0.0, float(width))
    frames[:, :, :, 1] = np.clip(frames[:, :, :, 1], 0.0, float(height))
    frames[:, :, :, 2] = rng.uniform(0.7, 1.0, size=(num_frames, tools, 5))
    return frames


def synth_dataset(
    out_dir,
    classes: int = 10,
    subjects: int = 8,
    trials: int = 3,
    seed: int = 0,
    tools: int = 2,
    frames_per_gesture: int = 75,
    labeled_tail: int = 9,
    image_width: int = 640,
    image_height: int = 480,
    frame_rate: float = DEFAULT_FRAME_RATE,
) -> Path:
    """Generate a synthetic dataset tree and return the manifest path.

    Layout: ``poses/<video>.csv``, ``transcripts/<video>.txt``,
    ``manifest.csv``, and ``gestures.txt`` with the label vocabulary.
    """
    if not 1 <= classes <= len(SUTURING_GESTURES):
        raise ValidationError(
            f"classes must be in [1, {len(SUTURING_GESTURES)}], got {classes}")
    if subjects < 1 or trials < 1 or tools < 1:
        raise ValidationError("subjects, trials, and tools must all be >= 1")
    if not 1 <= labeled_tail <= frames_per_gesture:
        raise ValidationError(
            f"labeled_tail must be in [1, frames_per_gesture={frames_per_gesture}]")
    out_dir = Path(out_dir)
    (out_dir / "poses").mkdir(parents=True, exist_ok=True)
    (out_dir / "transcripts").mkdir(parents=True, exist_ok=True)
    vocabulary = SUTURING_GESTURES[:classes]
    entries = []
    for s in range(subjects):
        subject_id = f"S{s + 1}"
        sub = _subject_params(seed, s)
        for k in range(trials):
            video_id = f"{subject_id}T{k + 1:02d}"
            r = rngmod.derived(seed, _TRIAL_STREAM, s, k)
            order = r.permutation(classes)
            frames = _render_video(
                r, order, classes, tools, frames_per_gesture, sub,
                image_width, image_height, frame_rate,
            )
            seq = PoseSequence(
                video_id=video_id,
                frames=frames,
                image_width=image_width,
                image_height=image_height,
                subject_id=subject_id,
                frame_rate=frame_rate,
            )
            tr_entries = []
            for i, g in enumerate(order):
                end = (i + 1) * frames_per_gesture - 1
                tr_entries.append(
                    TranscriptEntry(end - labeled_tail + 1, end, vocabulary[int(g)])
                )
            transcript = Transcript(video_id=video_id, entries=tuple(tr_entries))
            pose_rel = f"poses/{video_id}.csv"
            tr_rel = f"transcripts/{video_id}.txt"
            write_pose_file(seq, out_dir / pose_rel)
            write_transcript(transcript, out_dir / tr_rel)
            entries.append(
                VideoEntry(
                    video_id=video_id,
                    subject_id=subject_id,
                    task="synthetic",
                    pose_path=pose_rel,
                    transcript_path=tr_rel,
                    image_width=image_width,
                    image_height=image_height,
                )
            )
    manifest_path = out_dir / "manifest.csv"
    write_manifest(entries, manifest_path)
    (out_dir / VOCAB_FILENAME).write_text(
        "\n".join(vocabulary) + "\n", encoding="utf-8"
    )
    return manifest_path
