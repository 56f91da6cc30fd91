import numpy as np
import pytest

from skelact.datapipe import (
    SUTURING_GESTURES,
    Fold,
    PoseSequence,
    Transcript,
    TranscriptEntry,
    VideoEntry,
    build_louo_folds,
    load_dataset,
    load_manifest,
    load_pose_file,
    load_transcript,
    normalize_coords,
    segment,
    write_manifest,
    write_pose_file,
    write_transcript,
)
from skelact.errors import ValidationError
from skelact.synth import synth_dataset


def make_sequence(num_frames, tools=1, joints=5, video_id="vid", seed=0,
                  width=640, height=480):
    gen = np.random.default_rng(seed)
    frames = np.empty((num_frames, tools, joints, 3))
    frames[..., 0] = gen.uniform(0, width, (num_frames, tools, joints))
    frames[..., 1] = gen.uniform(0, height, (num_frames, tools, joints))
    frames[..., 2] = gen.uniform(0, 1, (num_frames, tools, joints))
    return PoseSequence(video_id=video_id, frames=frames,
                        image_width=width, image_height=height)


def brute_force_segments(seq, transcript, window, step, vocabulary):
    """Independent enumerator: walk every frame and apply the rules directly."""
    out = []
    for end in range(seq.num_frames):
        if end % step != 0:
            continue
        label = None
        for e in transcript.entries:
            if e.start_frame <= end <= e.end_frame:
                label = e.label
        if label is None:
            continue
        rows = []
        for t in range(end - window + 1, end + 1):
            rows.append(seq.frames[max(t, 0)])
        data = np.stack(rows).transpose(3, 0, 2, 1)
        out.append((end, vocabulary.index(label), data))
    return out


# ---------------------------------------------------------------- pose files

def test_pose_file_round_trip(tmp_path):
    seq = make_sequence(3, tools=2)
    path = tmp_path / "vid.csv"
    write_pose_file(seq, path)
    loaded = load_pose_file(path, 640, 480)
    assert loaded.video_id == "vid"
    assert loaded.num_frames == 3
    assert np.array_equal(loaded.frames, seq.frames)


def test_pose_file_missing_cell_names_location(tmp_path):
    seq = make_sequence(3, joints=5)
    path = tmp_path / "vid.csv"
    write_pose_file(seq, path)
    lines = path.read_text().splitlines()
    victim = next(i for i, ln in enumerate(lines) if ln.startswith("vid,1,0,4,"))
    path.write_text("\n".join(lines[:victim] + lines[victim + 1:]) + "\n")
    with pytest.raises(ValidationError, match="frame 1.*joint 4"):
        load_pose_file(path, 640, 480)


def test_pose_file_rejects_out_of_range_confidence(tmp_path):
    path = tmp_path / "vid.csv"
    path.write_text(
        "video_id,frame,tool,joint,x,y,confidence\n"
        "vid,0,0,0,1.0,2.0,1.2\n")
    with pytest.raises(ValidationError, match="confidence"):
        load_pose_file(path, 640, 480)


def test_pose_file_rejects_non_finite(tmp_path):
    path = tmp_path / "vid.csv"
    path.write_text(
        "video_id,frame,tool,joint,x,y,confidence\n"
        "vid,0,0,0,nan,2.0,0.5\n")
    with pytest.raises(ValidationError, match="non-finite"):
        load_pose_file(path, 640, 480)


def test_pose_file_rejects_duplicate_cell(tmp_path):
    path = tmp_path / "vid.csv"
    path.write_text(
        "video_id,frame,tool,joint,x,y,confidence\n"
        "vid,0,0,0,1.0,2.0,0.5\n"
        "vid,0,0,0,1.0,2.0,0.5\n")
    with pytest.raises(ValidationError, match="duplicate"):
        load_pose_file(path, 640, 480)


def test_pose_file_rejects_wrong_header(tmp_path):
    path = tmp_path / "vid.csv"
    path.write_text("frame,tool,joint,x,y,confidence\n")
    with pytest.raises(ValidationError, match="header"):
        load_pose_file(path, 640, 480)


# --------------------------------------------------------------- transcripts

def test_transcript_two_entries(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("0 120 G1\n121 300 G2\n")
    tr = load_transcript(path)
    assert len(tr.entries) == 2
    assert tr.gesture_at(0) == "G1"
    assert tr.gesture_at(120) == "G1"
    assert tr.gesture_at(121) == "G2"
    assert tr.gesture_at(301) is None


def test_transcript_rejects_overlap(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("0 120 G1\n100 300 G2\n")
    with pytest.raises(ValidationError, match="overlap"):
        load_transcript(path)


def test_transcript_rejects_unknown_label(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("0 120 G16\n")
    with pytest.raises(ValidationError, match="G16"):
        load_transcript(path)


def test_transcript_index_base_shift(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("1 90 G1\n")
    tr = load_transcript(path, index_base=1)
    assert tr.entries[0].start_frame == 0
    assert tr.entries[0].end_frame == 89


def test_transcript_round_trip(tmp_path):
    tr = Transcript("vid", (TranscriptEntry(0, 10, "G1"), TranscriptEntry(20, 30, "G8")))
    path = tmp_path / "vid.txt"
    write_transcript(tr, path)
    loaded = load_transcript(path)
    assert loaded.entries == tr.entries


# ------------------------------------------------------------- normalization

def test_normalize_center_maps_to_origin():
    seq = make_sequence(2)
    seq.frames[..., 0] = 320.0
    seq.frames[..., 1] = 240.0
    out = normalize_coords(seq)
    assert np.allclose(out.frames[..., :2], 0.0)


def test_normalize_extremes():
    seq = make_sequence(1)
    seq.frames[0, 0, 0, 0] = 0.0
    seq.frames[0, 0, 1, 0] = 640.0
    out = normalize_coords(seq)
    assert out.frames[0, 0, 0, 0] == -1.0
    assert out.frames[0, 0, 1, 0] == 1.0


def test_normalize_preserves_confidence():
    seq = make_sequence(2)
    out = normalize_coords(seq)
    assert np.array_equal(out.frames[..., 2], seq.frames[..., 2])


def test_normalize_applied_twice_rejected():
    seq = normalize_coords(make_sequence(2))
    with pytest.raises(ValidationError, match="already normalized"):
        normalize_coords(seq)


# ---------------------------------------------------------------- segmenting

def test_segment_front_padding_rule():
    seq = normalize_coords(make_sequence(6))
    tr = Transcript("vid", (TranscriptEntry(0, 5, "G1"),))
    segs = segment(seq, tr, window=90, step=5)
    by_end = {s.end_frame: s for s in segs}
    s5 = by_end[5]
    # 84 copies of frame 0 followed by frames 0..5
    frame0 = seq.frames[0].transpose(2, 1, 0)
    for t in range(84):
        assert np.array_equal(s5.data[:, t], frame0)
    for t in range(6):
        assert np.array_equal(s5.data[:, 84 + t], seq.frames[t].transpose(2, 1, 0))


def test_segment_count_fully_transcribed_video():
    seq = normalize_coords(make_sequence(300))
    tr = Transcript("vid", (TranscriptEntry(0, 299, "G1"),))
    segs = segment(seq, tr, window=90, step=3)
    assert len(segs) == 100  # one label every 3 frames, 10 per second at 30 fps


def test_segment_requires_normalized_sequence():
    seq = make_sequence(10)
    tr = Transcript("vid", (TranscriptEntry(0, 9, "G1"),))
    with pytest.raises(ValidationError, match="normalize"):
        segment(seq, tr)


def test_segment_matches_brute_force_oracle(rng):
    vocab = SUTURING_GESTURES
    for trial in range(10):
        num_frames = int(rng.integers(5, 140))
        seq = normalize_coords(make_sequence(num_frames, tools=2, seed=trial))
        entries = []
        cursor = 0
        while cursor < num_frames:
            length = int(rng.integers(1, 40))
            end = min(cursor + length, num_frames - 1)
            if rng.random() < 0.7:
                entries.append(TranscriptEntry(cursor, end, vocab[int(rng.integers(0, 10))]))
            cursor = end + 1 + int(rng.integers(0, 10))
        tr = Transcript("vid", tuple(entries))
        window = int(rng.integers(2, 95))
        step = int(rng.integers(1, 5))
        got = segment(seq, tr, window=window, step=step, vocabulary=vocab)
        expected = brute_force_segments(seq, tr, window, step, vocab)
        assert len(got) == len(expected)
        for s, (end, label, data) in zip(got, expected):
            assert s.end_frame == end
            assert s.label == label
            assert np.array_equal(s.data, data)


# --------------------------------------------------------------------- folds

def entry(video, subject):
    return VideoEntry(video, subject, "task", f"poses/{video}.csv",
                      f"transcripts/{video}.txt", 640, 480)


def test_louo_eight_subjects():
    entries = [entry(f"S{s}T{k}", f"S{s}") for s in range(1, 9) for k in range(5)]
    plan = build_louo_folds(entries)
    assert len(plan.folds) == 8
    all_videos = {e.video_id for e in entries}
    seen_tests = []
    for fold in plan.folds:
        assert len(fold.test_videos) == 5
        assert set(fold.test_videos) | set(fold.train_videos) == all_videos
        assert not set(fold.test_videos) & set(fold.train_videos)
        seen_tests.extend(fold.test_videos)
    assert sorted(seen_tests) == sorted(all_videos)


def test_louo_generalizes_with_warning():
    entries = [entry(f"S{s}T{k}", f"S{s}") for s in range(1, 4) for k in range(2)]
    with pytest.warns(UserWarning, match="8 subjects"):
        plan = build_louo_folds(entries)
    assert len(plan.folds) == 3


def test_louo_rejects_single_subject():
    with pytest.raises(ValidationError):
        build_louo_folds([entry("v1", "S1"), entry("v2", "S1")])


def test_manifest_round_trip(tmp_path):
    entries = [entry("v1", "S1"), entry("v2", "S2")]
    path = tmp_path / "manifest.csv"
    write_manifest(entries, path)
    assert load_manifest(path) == entries


def test_manifest_rejects_duplicates(tmp_path):
    path = tmp_path / "manifest.csv"
    write_manifest([entry("v1", "S1"), entry("v1", "S2")], path)
    with pytest.raises(ValidationError, match="duplicate"):
        load_manifest(path)


# --------------------------------------------------------------------- synth

def tree_bytes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_synth_same_seed_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth_dataset(a, classes=3, subjects=2, trials=1, seed=11,
                  frames_per_gesture=20, labeled_tail=6)
    synth_dataset(b, classes=3, subjects=2, trials=1, seed=11,
                  frames_per_gesture=20, labeled_tail=6)
    assert tree_bytes(a) == tree_bytes(b)
    synth_dataset(tmp_path / "c", classes=3, subjects=2, trials=1, seed=12,
                  frames_per_gesture=20, labeled_tail=6)
    assert tree_bytes(a) != tree_bytes(tmp_path / "c")


def test_synth_output_passes_loaders(tmp_path):
    manifest = synth_dataset(tmp_path, classes=4, subjects=2, trials=2, seed=3,
                             frames_per_gesture=18, labeled_tail=6)
    ds = load_dataset(manifest, vocabulary=SUTURING_GESTURES[:4])
    assert len(ds.videos) == 4
    assert ds.subjects() == ["S1", "S2"]
    for vd in ds.videos.values():
        assert vd.sequence.normalized
        labels = {e.label for e in vd.transcript.entries}
        assert labels == set(SUTURING_GESTURES[:4])


def test_synth_classes_are_separable_nearest_centroid(tmp_path):
    # oracle baseline: nearest centroid on raw segment tensors must beat
    # the 1/classes chance rate, confirming the generator injects signal
    manifest = synth_dataset(tmp_path, classes=5, subjects=3, trials=1, seed=5,
                             tools=1, frames_per_gesture=45, labeled_tail=9)
    ds = load_dataset(manifest, vocabulary=SUTURING_GESTURES[:5])
    segs = ds.segments(window=45, step=3)
    X = np.stack([s.data.reshape(-1) for s in segs])
    y = np.array([s.label for s in segs])
    train = np.arange(len(y)) % 3 != 0
    centroids = np.stack([X[train & (y == k)].mean(axis=0) for k in range(5)])
    d = ((X[~train, None, :] - centroids[None]) ** 2).sum(axis=2)
    acc = float(np.mean(np.argmin(d, axis=1) == y[~train]))
    assert acc > 1.0 / 5.0, f"nearest-centroid accuracy {acc}"
