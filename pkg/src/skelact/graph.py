"""Surgical-tool skeletons and partitioned spatial adjacency.

The skeleton is an undirected connected graph over V joints.  The spatial
convolution samples each joint's 1-hop neighborhood and splits it into three
groups by Euclidean distance to the skeleton's gravity center (the mean of
all joint coordinates in a frame): the root group (equal distance, which
includes the root itself), the centripetal group (strictly closer), and the
centrifugal group (strictly farther).  Ties land in the root group so the
degenerate all-coincident pose stays well defined.

Skeleton spec file format (plain text, UTF-8, '#' comments)::

    skeleton-spec v1
    joints arm wrist shaft effector_a effector_b
    edge 0 1
    edge 1 2
    edge 2 3
    edge 2 4
    center 2
    refpose 0 0.0 0.0
    refpose 1 0.0 1.0
    ...

``joints`` and ``center`` are required, ``edge`` appears once per skeleton
edge, and the optional ``refpose`` lines give a reference coordinate per
joint index for static partitioning.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

SKELETON_HEADER = "skeleton-spec v1"

ROOT_GROUP = 0
CENTRIPETAL = 1
CENTRIFUGAL = 2

DEFAULT_ALPHA = 1e-3


@dataclass(frozen=True, eq=False)
class SkeletonSpec:
    """Joint names, undirected edges, the center joint, and an optional
    reference pose (V x 2) used for static partitioning."""

    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    center_joint: int
    reference_pose: np.ndarray | None = None

    def __post_init__(self):
        v = len(self.joint_names)
        if v < 2:
            raise ValidationError("a skeleton needs at least 2 joints")
        if len(set(self.joint_names)) != v:
            raise ValidationError("joint names must be unique")
        seen = set()
        for a, b in self.edges:
            if not (0 <= a < v and 0 <= b < v):
                raise ValidationError(f"edge ({a}, {b}) references a joint outside [0, {v})")
            if a == b:
                raise ValidationError(f"self-loop on joint {a}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValidationError(f"duplicate edge ({a}, {b})")
            seen.add(key)
        if not (0 <= self.center_joint < v):
            raise ValidationError(f"center joint {self.center_joint} outside [0, {v})")
        if self.reference_pose is not None:
            pose = np.asarray(self.reference_pose, dtype=np.float64)
            if pose.shape != (v, 2):
                raise ValidationError(
                    f"reference pose must be ({v}, 2), got {pose.shape}")
            if not np.all(np.isfinite(pose)):
                raise ValidationError("reference pose contains non-finite coordinates")
            object.__setattr__(self, "reference_pose", pose)
        if len(self._components()) != 1:
            raise ValidationError("skeleton edges do not form a connected graph")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def neighbors(self, joint: int) -> tuple[int, ...]:
        out = []
        for a, b in self.edges:
            if a == joint:
                out.append(b)
            elif b == joint:
                out.append(a)
        return tuple(sorted(out))

    def hop_distances(self, source: int) -> np.ndarray:
        """Breadth-first hop count from ``source`` to every joint."""
        dist = np.full(self.num_joints, -1, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        while queue:
            i = queue.popleft()
            for j in self.neighbors(i):
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return dist

    def _components(self) -> list[set[int]]:
        unseen = set(range(self.num_joints))
        comps = []
        while unseen:
            start = min(unseen)
            comp = {start}
            queue = deque([start])
            while queue:
                i = queue.popleft()
                for j in self.neighbors(i):
                    if j not in comp:
                        comp.add(j)
                        queue.append(j)
            unseen -= comp
            comps.append(comp)
        return comps


@dataclass
class PartitionedAdjacency:
    """K stacked V x V non-negative matrices, one per spatial partition."""

    matrices: np.ndarray  # (K, V, V)
    normalized: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=np.float64)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ValidationError(f"partition stack must be (K, V, V), got {m.shape}")
        if np.any(m < 0):
            raise ValidationError("partition matrices must be entrywise non-negative")
        self.matrices = m

    @property
    def K(self) -> int:
        return self.matrices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.matrices.shape[1]


# Reference pose used by the default skeleton: arm at the origin, wrist and
# shaft along +y, the two effector tips branching from the shaft.
DEFAULT_REFERENCE_POSE = np.array(
    [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [-0.5, 3.0], [0.5, 3.0]]
)


def default_tool_skeleton() -> SkeletonSpec:
    """The 5-joint grasper skeleton: arm - wrist - shaft, with the shaft
    branching to both end effectors; the shaft is the center joint."""
    return SkeletonSpec(
        joint_names=("arm", "wrist", "shaft", "effector_a", "effector_b"),
        edges=((0, 1), (1, 2), (2, 3), (2, 4)),
        center_joint=2,
        reference_pose=DEFAULT_REFERENCE_POSE.copy(),
    )


def build_adjacency(spec: SkeletonSpec) -> np.ndarray:
    """Symmetric 0/1 adjacency with zero diagonal."""
    v = spec.num_joints
    adj = np.zeros((v, v))
    for a, b in spec.edges:
        adj[a, b] = 1.0
        adj[b, a] = 1.0
    return adj


def gravity_center(pose: np.ndarray) -> np.ndarray:
    """Mean coordinate of all joints in one frame."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim != 2 or pose.shape[1] != 2:
        raise ValidationError(f"pose must be (V, 2), got {pose.shape}")
    return pose.mean(axis=0)


def neighbor_partition_labels(spec: SkeletonSpec, pose: np.ndarray) -> np.ndarray:
    """Partition label for each (root, neighbor) pair.

    Returns a (V, V) integer matrix with -1 outside the sampled
    neighborhoods and ROOT_GROUP / CENTRIPETAL / CENTRIFUGAL at (i, j) for
    j in {i} union neighbors(i), judged by distance to the gravity center.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (spec.num_joints, 2):
        raise ValidationError(
            f"pose must be ({spec.num_joints}, 2), got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValidationError("pose contains non-finite coordinates")
    center = gravity_center(pose)
    dist = np.linalg.norm(pose - center, axis=1)
    v = spec.num_joints
    labels = np.full((v, v), -1, dtype=np.int64)
    for i in range(v):
        labels[i, i] = ROOT_GROUP
        for j in spec.neighbors(i):
            if dist[j] == dist[i]:
                labels[i, j] = ROOT_GROUP
            elif dist[j] < dist[i]:
                labels[i, j] = CENTRIPETAL
            else:
                labels[i, j] = CENTRIFUGAL
    return labels


def _stack_from_labels(labels: np.ndarray) -> PartitionedAdjacency:
    v = labels.shape[0]
    matrices = np.zeros((3, v, v))
    for k in (ROOT_GROUP, CENTRIPETAL, CENTRIFUGAL):
        matrices[k][labels == k] = 1.0
    return PartitionedAdjacency(matrices, normalized=False)


def spatial_config_partition(spec: SkeletonSpec, pose: np.ndarray) -> PartitionedAdjacency:
    """Un-normalized K=3 partition stack from joint distances to the gravity
    center of ``pose``.  Summed over K, the stack equals A + I."""
    return _stack_from_labels(neighbor_partition_labels(spec, pose))


def hop_partition_labels(spec: SkeletonSpec) -> np.ndarray:
    """Static fallback labels from hop distance to the center joint."""
    hops = spec.hop_distances(spec.center_joint)
    v = spec.num_joints
    labels = np.full((v, v), -1, dtype=np.int64)
    for i in range(v):
        labels[i, i] = ROOT_GROUP
        for j in spec.neighbors(i):
            if hops[j] == hops[i]:
                labels[i, j] = ROOT_GROUP
            elif hops[j] < hops[i]:
                labels[i, j] = CENTRIPETAL
            else:
                labels[i, j] = CENTRIFUGAL
    return labels


def normalize_partitions(p: PartitionedAdjacency, alpha: float = DEFAULT_ALPHA) -> PartitionedAdjacency:
    """Row-degree normalization: each matrix becomes inv(D_k + alpha I) A_k.

    The additive alpha keeps rows that are entirely zero finite (they stay
    zero) and makes every normalized row sum strictly less than 1.
    """
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    degrees = p.matrices.sum(axis=2, keepdims=True) + alpha
    return PartitionedAdjacency(p.matrices / degrees, normalized=True)


def build_partition_stack(
    spec: SkeletonSpec,
    mode: str = "static",
    pose_source: np.ndarray | None = None,
    strategy: str = "spatial",
    alpha: float = DEFAULT_ALPHA,
):
    """Normalized partition stack(s) for the spatial convolution.

    strategy "spatial" gives the K=3 distance-based stack; "uniform" gives
    the single-partition A + I baseline for ablation.

    Static mode computes the stack once, from the spec's reference pose when
    present and otherwise from hop distance to the center joint.  Per-frame
    mode requires ``pose_source`` of shape (T, V, 2) and returns a list with
    one stack per frame.
    """
    if strategy == "uniform":
        v = spec.num_joints
        base = PartitionedAdjacency((build_adjacency(spec) + np.eye(v))[np.newaxis])
        return normalize_partitions(base, alpha)
    if strategy != "spatial":
        raise ValidationError(f"unknown partition strategy {strategy!r}")
    if mode == "static":
        if spec.reference_pose is not None:
            stack = spatial_config_partition(spec, spec.reference_pose)
        else:
            stack = _stack_from_labels(hop_partition_labels(spec))
        return normalize_partitions(stack, alpha)
    if mode == "per_frame":
        if pose_source is None:
            raise ValidationError("per_frame mode needs a pose source of shape (T, V, 2)")
        poses = np.asarray(pose_source, dtype=np.float64)
        if poses.ndim != 3 or poses.shape[1:] != (spec.num_joints, 2):
            raise ValidationError(
                f"pose source must be (T, {spec.num_joints}, 2), got {poses.shape}")
        if not np.all(np.isfinite(poses)):
            raise ValidationError("pose source contains missing or non-finite coordinates")
        return [
            normalize_partitions(spatial_config_partition(spec, frame), alpha)
            for frame in poses
        ]
    raise ValidationError(f"unknown partition mode {mode!r}")


def save_skeleton(spec: SkeletonSpec, path) -> None:
    lines = [SKELETON_HEADER, "joints " + " ".join(spec.joint_names)]
    for a, b in spec.edges:
        lines.append(f"edge {a} {b}")
    lines.append(f"center {spec.center_joint}")
    if spec.reference_pose is not None:
        for i, (x, y) in enumerate(spec.reference_pose):
            lines.append(f"refpose {i} {float(x)!r} {float(y)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_skeleton(path) -> SkeletonSpec:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != SKELETON_HEADER:
        raise ValidationError(
            f"{path}: missing or unsupported header (expected {SKELETON_HEADER!r})")
    joint_names: tuple[str, ...] | None = None
    edges: list[tuple[int, int]] = []
    center: int | None = None
    refpose: dict[int, tuple[float, float]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        kind, args = fields[0], fields[1:]
        try:
            if kind == "joints":
                joint_names = tuple(args)
            elif kind == "edge":
                edges.append((int(args[0]), int(args[1])))
            elif kind == "center":
                center = int(args[0])
            elif kind == "refpose":
                refpose[int(args[0])] = (float(args[1]), float(args[2]))
            else:
                raise ValidationError(f"{path}:{lineno}: unknown directive {kind!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"{path}:{lineno}: malformed {kind!r} line") from exc
    if joint_names is None:
        raise ValidationError(f"{path}: missing 'joints' line")
    if center is None:
        raise ValidationError(f"{path}: missing 'center' line")
    pose = None
    if refpose:
        if sorted(refpose) != list(range(len(joint_names))):
            raise ValidationError(f"{path}: refpose lines must cover every joint exactly once")
        pose = np.array([refpose[i] for i in range(len(joint_names))])
    return SkeletonSpec(joint_names, tuple(edges), center, pose)
