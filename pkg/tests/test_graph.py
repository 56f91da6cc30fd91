import math

import numpy as np
import pytest

from skelact.errors import ValidationError
from skelact.graph import (
    CENTRIFUGAL,
    CENTRIPETAL,
    ROOT_GROUP,
    PartitionedAdjacency,
    SkeletonSpec,
    build_adjacency,
    build_partition_stack,
    default_tool_skeleton,
    gravity_center,
    hop_partition_labels,
    load_skeleton,
    neighbor_partition_labels,
    normalize_partitions,
    save_skeleton,
    spatial_config_partition,
)

REFERENCE_POSE = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [-0.5, 3.0], [0.5, 3.0]])


def test_default_skeleton_shape():
    spec = default_tool_skeleton()
    assert spec.num_joints == 5
    assert len(spec.edges) == 4
    assert spec.center_joint == 2
    # tree: V-1 edges and fully connected (construction validates connectivity)
    assert len(spec.edges) == spec.num_joints - 1


def test_default_skeleton_diameter_is_three():
    spec = default_tool_skeleton()
    longest = max(int(spec.hop_distances(i).max()) for i in range(spec.num_joints))
    assert longest == 3  # arm to either effector


def test_adjacency_matches_edge_list():
    adj = build_adjacency(default_tool_skeleton())
    expected = np.zeros((5, 5))
    for a, b in ((0, 1), (1, 2), (2, 3), (2, 4)):
        expected[a, b] = expected[b, a] = 1.0
    assert np.array_equal(adj, expected)
    assert np.array_equal(np.diag(adj), np.zeros(5))


def test_two_joint_adjacency():
    spec = SkeletonSpec(("a", "b"), ((0, 1),), 0)
    assert np.array_equal(build_adjacency(spec), [[0.0, 1.0], [1.0, 0.0]])


def test_adjacency_symmetry_random_specs(rng):
    for _ in range(20):
        v = int(rng.integers(2, 8))
        # random spanning tree keeps the spec connected
        edges = [(int(rng.integers(0, i)), i) for i in range(1, v)]
        spec = SkeletonSpec(tuple(f"j{i}" for i in range(v)), tuple(edges),
                            int(rng.integers(0, v)))
        adj = build_adjacency(spec)
        assert np.array_equal(adj, adj.T)


def test_skeleton_validation_rejects_bad_edges():
    with pytest.raises(ValidationError):
        SkeletonSpec(("a", "b"), ((0, 0),), 0)          # self loop
    with pytest.raises(ValidationError):
        SkeletonSpec(("a", "b"), ((0, 1), (1, 0)), 0)   # duplicate
    with pytest.raises(ValidationError):
        SkeletonSpec(("a", "b", "c"), ((0, 1),), 0)     # disconnected
    with pytest.raises(ValidationError):
        SkeletonSpec(("a", "b"), ((0, 2),), 0)          # out of range


def test_gravity_center_is_joint_mean():
    assert np.allclose(gravity_center(REFERENCE_POSE), [0.0, 1.8])


def test_partition_labels_hand_derived_reference_pose():
    # distances to c=(0, 1.8): arm 1.8, wrist 0.8, shaft 0.2, effectors 1.3
    spec = default_tool_skeleton()
    labels = neighbor_partition_labels(spec, REFERENCE_POSE)
    shaft = 2
    assert labels[shaft, shaft] == ROOT_GROUP
    for j in (1, 3, 4):  # wrist and both effectors are farther than the shaft
        assert labels[shaft, j] == CENTRIFUGAL
    # wrist's view: shaft is closer (centripetal), arm farther (centrifugal)
    assert labels[1, 2] == CENTRIPETAL
    assert labels[1, 0] == CENTRIFUGAL


def test_partition_degenerate_all_coincident_pose():
    spec = default_tool_skeleton()
    pose = np.ones((5, 2)) * 3.7
    part = spatial_config_partition(spec, pose)
    adj = build_adjacency(spec)
    assert np.array_equal(part.matrices[ROOT_GROUP], adj + np.eye(5))
    assert part.matrices[CENTRIPETAL].sum() == 0
    assert part.matrices[CENTRIFUGAL].sum() == 0


def test_partition_exhaustiveness_random_poses(rng):
    spec = default_tool_skeleton()
    target = build_adjacency(spec) + np.eye(5)
    for _ in range(100):
        pose = rng.uniform(-5.0, 5.0, (5, 2))
        part = spatial_config_partition(spec, pose)
        assert np.array_equal(part.matrices.sum(axis=0), target)
        assert np.all(part.matrices >= 0.0)


def test_rigid_motion_leaves_labels_unchanged(rng):
    spec = default_tool_skeleton()
    for _ in range(25):
        pose = rng.uniform(-4.0, 4.0, (5, 2))
        base = neighbor_partition_labels(spec, pose)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        shift = rng.uniform(-10.0, 10.0, 2)
        moved = pose @ rot.T + shift
        assert np.array_equal(neighbor_partition_labels(spec, moved), base)


def test_uniform_scaling_leaves_labels_unchanged(rng):
    spec = default_tool_skeleton()
    for _ in range(25):
        pose = rng.uniform(-4.0, 4.0, (5, 2))
        base = neighbor_partition_labels(spec, pose)
        anchor = rng.uniform(-3.0, 3.0, 2)
        s = rng.uniform(0.1, 7.0)
        scaled = anchor + s * (pose - anchor)
        assert np.array_equal(neighbor_partition_labels(spec, scaled), base)


def test_normalize_preserves_zero_rows():
    p = PartitionedAdjacency(np.array([[[0.0, 0.0], [1.0, 1.0]]]))
    out = normalize_partitions(p, alpha=0.001)
    assert np.array_equal(out.matrices[0][0], [0.0, 0.0])
    assert np.all(np.isfinite(out.matrices))


def test_normalize_row_sum_algebra(rng):
    alpha = 0.001
    m = rng.uniform(0.0, 2.0, (2, 4, 4))
    out = normalize_partitions(PartitionedAdjacency(m), alpha)
    sums = m.sum(axis=2)
    assert np.allclose(out.matrices.sum(axis=2), sums / (sums + alpha))
    assert np.all(out.matrices.sum(axis=2) < 1.0)


def test_normalize_default_skeleton_degrees():
    # A + I row sums on the default skeleton are [2, 3, 4, 2, 2]
    spec = default_tool_skeleton()
    single = PartitionedAdjacency((build_adjacency(spec) + np.eye(5))[np.newaxis])
    out = normalize_partitions(single, alpha=1e-12)
    assert np.allclose(out.matrices[0].sum(axis=1), 1.0)
    degrees = (build_adjacency(spec) + np.eye(5)).sum(axis=1)
    assert np.array_equal(degrees, [2.0, 3.0, 4.0, 2.0, 2.0])


def test_normalize_rejects_nonpositive_alpha():
    p = PartitionedAdjacency(np.ones((1, 2, 2)))
    with pytest.raises(ValidationError):
        normalize_partitions(p, alpha=0.0)


def test_static_stack_matches_composition():
    spec = default_tool_skeleton()
    stack = build_partition_stack(spec, mode="static")
    composed = normalize_partitions(spatial_config_partition(spec, REFERENCE_POSE))
    assert np.allclose(stack.matrices, composed.matrices)
    assert stack.normalized and stack.K == 3


def test_uniform_baseline_single_partition():
    spec = default_tool_skeleton()
    stack = build_partition_stack(spec, strategy="uniform")
    assert stack.K == 1
    assert stack.normalized
    raw = build_adjacency(spec) + np.eye(5)
    assert np.allclose(stack.matrices[0], raw / (raw.sum(axis=1, keepdims=True) + 1e-3))


def test_hop_fallback_labels():
    # hop distances to the shaft (center): arm 2, wrist 1, shaft 0, effectors 1.
    # from the wrist: the shaft is hop-closer (centripetal) and the arm is
    # hop-farther (centrifugal)
    spec = SkeletonSpec(default_tool_skeleton().joint_names,
                        default_tool_skeleton().edges, center_joint=2)
    labels = hop_partition_labels(spec)
    wrist = 1
    assert labels[wrist, 2] == CENTRIPETAL
    assert labels[wrist, 0] == CENTRIFUGAL
    assert labels[wrist, wrist] == ROOT_GROUP
    stack = build_partition_stack(spec, mode="static")
    assert stack.K == 3


def test_per_frame_mode_returns_stack_per_frame(rng):
    spec = default_tool_skeleton()
    poses = rng.uniform(-1.0, 1.0, (7, 5, 2))
    stacks = build_partition_stack(spec, mode="per_frame", pose_source=poses)
    assert len(stacks) == 7
    target = build_adjacency(spec) + np.eye(5)
    for frame, stack in zip(poses, stacks):
        expected = normalize_partitions(spatial_config_partition(spec, frame))
        assert np.allclose(stack.matrices, expected.matrices)


def test_per_frame_mode_rejects_missing_coordinates(rng):
    spec = default_tool_skeleton()
    poses = rng.uniform(-1.0, 1.0, (3, 5, 2))
    poses[1, 2, 0] = np.nan
    with pytest.raises(ValidationError):
        build_partition_stack(spec, mode="per_frame", pose_source=poses)
    with pytest.raises(ValidationError):
        build_partition_stack(spec, mode="per_frame", pose_source=None)


def test_skeleton_file_round_trip(tmp_path):
    spec = default_tool_skeleton()
    path = tmp_path / "grasper.skel"
    save_skeleton(spec, path)
    loaded = load_skeleton(path)
    assert loaded.joint_names == spec.joint_names
    assert loaded.edges == spec.edges
    assert loaded.center_joint == spec.center_joint
    assert np.array_equal(loaded.reference_pose, spec.reference_pose)


def test_skeleton_file_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.skel"
    path.write_text("skeleton-spec v9\njoints a b\nedge 0 1\ncenter 0\n")
    with pytest.raises(ValidationError):
        load_skeleton(path)


def test_skeleton_file_rejects_unknown_directive(tmp_path):
    path = tmp_path / "bad.skel"
    path.write_text("skeleton-spec v1\njoints a b\nedge 0 1\ncenter 0\nwhat 1\n")
    with pytest.raises(ValidationError):
        load_skeleton(path)
