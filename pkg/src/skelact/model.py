"""The spatial-temporal graph convolution classifier.

Architecture: optional input normalization over the flattened
(channel x joint x instance) axis, a trunk of spatial-temporal units, global
average pooling over time and joints, a mean over tool instances, dropout,
and a linear softmax head.

Each unit applies the partition-wise spatial graph convolution, then batch
norm, relu, a temporal convolution (kernel spans time only, never joints),
batch norm, dropout, and a residual connection added before the final relu.
The residual path is identity when shapes match and a stride-matched 1x1
temporal convolution otherwise.

The default trunk is 9 units with channels 64,64,64,128,128,128,256,256,256
and temporal stride 2 at units 4 and 7; every piece of that schedule is
configuration, not architecture.

Parameter container format (little-endian):

    magic   8 bytes  b"SKGCPRMS"
    version u32      currently 1
    config  u32 length + canonical JSON echo of the model config
    count   u32      number of entries, in declaration order
    entry   u8 kind (0 parameter, 1 buffer)
            u16 name length + utf-8 name
            u8 ndim + ndim * u32 extents
            raw float64 data
    sha256  32 bytes over everything above

Loading verifies the magic, version, and checksum, and rejects a container
whose embedded config disagrees with the expected one.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError
from .graph import PartitionedAdjacency, SkeletonSpec, build_partition_stack
from .numerics import Tensor, ops

PARAMS_MAGIC = b"SKGCPRMS"
PARAMS_VERSION = 1

DEFAULT_CHANNELS = (64, 64, 64, 128, 128, 128, 256, 256, 256)
DEFAULT_STRIDES = (1, 1, 1, 2, 1, 1, 2, 1, 1)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 10
    in_channels: int = 3
    num_joints: int = 5
    num_instances: int = 2
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    strides: tuple[int, ...] = DEFAULT_STRIDES
    temporal_kernel: int = 9
    residual: bool = True
    use_batch_norm: bool = True
    input_batch_norm: bool = True
    unit_dropout: float = 0.0
    head_dropout: float = 0.5
    partition_strategy: str = "spatial"
    partition_alpha: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        if self.in_channels < 1 or self.num_joints < 2 or self.num_instances < 1:
            raise ValidationError("in_channels, num_joints, num_instances out of range")
        if len(self.channels) < 1 or len(self.channels) != len(self.strides):
            raise ValidationError(
                f"channels and strides must be equal-length non-empty tuples, got "
                f"{len(self.channels)} and {len(self.strides)}")
        if any(c < 1 for c in self.channels):
            raise ValidationError("unit channel counts must be >= 1")
        if any(s not in (1, 2) for s in self.strides):
            raise ValidationError(f"temporal strides must be 1 or 2, got {self.strides}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValidationError(
                f"temporal kernel must be odd and positive, got {self.temporal_kernel}")
        if not 0.0 <= self.unit_dropout < 1.0 or not 0.0 <= self.head_dropout < 1.0:
            raise ValidationError("dropout rates must be in [0, 1)")
        if self.partition_strategy not in ("spatial", "uniform"):
            raise ValidationError(
                f"unknown partition strategy {self.partition_strategy!r}")
        if self.partition_alpha <= 0:
            raise ValidationError("partition_alpha must be positive")

    @property
    def num_units(self) -> int:
        return len(self.channels)

    @property
    def num_partitions(self) -> int:
        return 1 if self.partition_strategy == "uniform" else 3

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config key {sorted(unknown)[0]!r}")
        return cls(**d)


def _unit_plan(config: ModelConfig) -> list[tuple[int, int, int, bool, bool]]:
    """(in_channels, out_channels, stride, residual, needs_res_map) per unit.

    The first unit never has a residual connection.
    """
    plan = []
    c_in = config.in_channels
    for i, (c_out, stride) in enumerate(zip(config.channels, config.strides)):
        res = config.residual and i > 0
        needs_map = res and (c_in != c_out or stride != 1)
        plan.append((c_in, c_out, stride, res, needs_map))
        c_in = c_out
    return plan


def _structure(config: ModelConfig) -> tuple[list[tuple[str, tuple[int, ...]]], list[tuple[str, tuple[int, ...]]]]:
    """Parameter and buffer (name, shape) lists in declaration order."""
    tensors: list[tuple[str, tuple[int, ...]]] = []
    buffers: list[tuple[str, tuple[int, ...]]] = []
    k = config.num_partitions
    kt = config.temporal_kernel
    if config.input_batch_norm:
        n = config.in_channels * config.num_joints * config.num_instances
        tensors += [("input_bn.gamma", (n,)), ("input_bn.beta", (n,))]
        buffers += [("input_bn.running_mean", (n,)), ("input_bn.running_var", (n,))]
    for i, (c_in, c_out, _, _, needs_map) in enumerate(_unit_plan(config), start=1):
        u = f"unit{i}"
        tensors += [
            (f"{u}.spatial.weight", (k, c_out, c_in)),
            (f"{u}.spatial.bias", (c_out,)),
        ]
        if config.use_batch_norm:
            tensors += [(f"{u}.bn1.gamma", (c_out,)), (f"{u}.bn1.beta", (c_out,))]
            buffers += [
                (f"{u}.bn1.running_mean", (c_out,)),
                (f"{u}.bn1.running_var", (c_out,)),
            ]
        tensors += [
            (f"{u}.tconv.weight", (c_out, c_out, kt, 1)),
            (f"{u}.tconv.bias", (c_out,)),
        ]
        if config.use_batch_norm:
            tensors += [(f"{u}.bn2.gamma", (c_out,)), (f"{u}.bn2.beta", (c_out,))]
            buffers += [
                (f"{u}.bn2.running_mean", (c_out,)),
                (f"{u}.bn2.running_var", (c_out,)),
            ]
        if needs_map:
            tensors.append((f"{u}.res.weight", (c_out, c_in, 1, 1)))
    tensors += [
        ("head.weight", (config.channels[-1], config.num_classes)),
        ("head.bias", (config.num_classes,)),
    ]
    return tensors, buffers


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gamma") or name.endswith("running_var"):
        return np.ones(shape)
    if name.endswith((".beta", "running_mean")):
        return np.zeros(shape)
    if name.endswith("spatial.weight"):
        k, _, c_in = shape
        return rng.normal(0.0, np.sqrt(2.0 / (c_in * k)), size=shape)
    if name.endswith("tconv.weight"):
        _, c_in, kt, _ = shape
        return rng.normal(0.0, np.sqrt(2.0 / (c_in * kt)), size=shape)
    if name.endswith("res.weight"):
        _, c_in, _, _ = shape
        return rng.normal(0.0, np.sqrt(2.0 / c_in), size=shape)
    if name == "head.weight":
        fan_in, fan_out = shape
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    if name.endswith(".bias"):
        # small but non-degenerate: keeps relu inputs off exact zero so
        # central differences stay well posed at the unperturbed point
        return rng.uniform(-0.05, 0.05, size=shape)
    raise ValidationError(f"no initializer for parameter {name!r}")


class StgcnParams:
    """All learnable tensors plus batch-norm running buffers, keyed by name
    in a declaration order that is a pure function of the config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "StgcnParams":
        t_struct, b_struct = _structure(config)
        tensors = {name: Tensor(_init_array(name, shape, rng), name=name) for name, shape in t_struct}
        buffers = {name: _init_array(name, shape, rng) for name, shape in b_struct}
        return cls(config, tensors, buffers)

    def items(self):
        return self.tensors.items()

    def decay_applies(self, name: str) -> bool:
        """Weight decay targets weights only, never biases or norm scales."""
        return name.endswith(".weight")

    def num_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def clone(self) -> "StgcnParams":
        tensors = {n: Tensor(t.data.copy(), name=n) for n, t in self.tensors.items()}
        buffers = {n: b.copy() for n, b in self.buffers.items()}
        return StgcnParams(self.config, tensors, buffers)

    def allclose(self, other: "StgcnParams") -> bool:
        return all(
            np.array_equal(t.data, other.tensors[n].data) for n, t in self.tensors.items()
        ) and all(np.array_equal(b, other.buffers[n]) for n, b in self.buffers.items())


def build_adjacency_for(config: ModelConfig, skeleton: SkeletonSpec) -> PartitionedAdjacency:
    if skeleton.num_joints != config.num_joints:
        raise ValidationError(
            f"skeleton has {skeleton.num_joints} joints but the model expects "
            f"{config.num_joints}")
    return build_partition_stack(
        skeleton, mode="static", strategy=config.partition_strategy,
        alpha=config.partition_alpha,
    )


class StgcnModel:
    """Binds a config, its parameters, and a fixed partitioned adjacency."""

    def __init__(self, config: ModelConfig, params: StgcnParams, adjacency: PartitionedAdjacency):
        if params.config != config:
            raise ValidationError("parameter set was built for a different config")
        if not adjacency.normalized:
            raise ValidationError("model adjacency must be normalized")
        if adjacency.K != config.num_partitions:
            raise ValidationError(
                f"adjacency has {adjacency.K} partitions, config expects "
                f"{config.num_partitions}")
        if adjacency.num_joints != config.num_joints:
            raise ValidationError(
                f"adjacency is over {adjacency.num_joints} joints, config expects "
                f"{config.num_joints}")
        self.config = config
        self.params = params
        self.adjacency = adjacency

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        skeleton: SkeletonSpec,
        rng: np.random.Generator,
    ) -> "StgcnModel":
        return cls(
            config,
            StgcnParams.initialize(config, rng),
            build_adjacency_for(config, skeleton),
        )

    def _bn(self, x: Tensor, prefix: str, training: bool) -> Tensor:
        p, b = self.params.tensors, self.params.buffers
        return ops.batch_norm(
            x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
            b[f"{prefix}.running_mean"], b[f"{prefix}.running_var"],
            training=training,
        )

    def _unit(self, x: Tensor, index: int, plan, training: bool, rng) -> Tensor:
        cfg = self.config
        p = self.params.tensors
        c_in, c_out, stride, residual, needs_map = plan
        u = f"unit{index}"
        y = ops.partition_mix(x, self.adjacency.matrices, p[f"{u}.spatial.weight"])
        y = ops.bias_add(y, p[f"{u}.spatial.bias"])
        if cfg.use_batch_norm:
            y = self._bn(y, f"{u}.bn1", training)
        y = ops.relu(y)
        y = ops.temporal_conv(y, p[f"{u}.tconv.weight"], stride=stride)
        y = ops.bias_add(y, p[f"{u}.tconv.bias"])
        if cfg.use_batch_norm:
            y = self._bn(y, f"{u}.bn2", training)
        if cfg.unit_dropout > 0:
            y = ops.dropout(y, 1.0 - cfg.unit_dropout, rng, training)
        if residual:
            r = x if not needs_map else ops.temporal_conv(
                x, p[f"{u}.res.weight"], stride=stride, pad=0)
            y = ops.add(y, r)
        return ops.relu(y)

    def unit_forward(self, x, index: int, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Run one spatial-temporal unit (1-based index) on a (N, C, T, V)
        input; mainly for inspection and unit-level verification."""
        plans = _unit_plan(self.config)
        if not 1 <= index <= len(plans):
            raise ValidationError(f"unit index {index} outside 1..{len(plans)}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 4 or x.shape[3] != self.config.num_joints:
            raise ValidationError(
                f"unit input must be (N, C, T, V={self.config.num_joints}), "
                f"got shape {x.shape}")
        return self._unit(x, index, plans[index - 1], training, rng)

    def logits(self, batch: np.ndarray, training: bool, rng: np.random.Generator | None = None) -> Tensor:
        """Forward pass over a (N, C, T, V, M) batch to (N, num_classes)."""
        cfg = self.config
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 5:
            raise ValidationError(f"batch must be (N, C, T, V, M), got shape {x.shape}")
        n, c, t, v, m = x.shape
        if c != cfg.in_channels or v != cfg.num_joints or m != cfg.num_instances:
            raise ValidationError(
                f"batch shape {x.shape} does not match config "
                f"(C={cfg.in_channels}, V={cfg.num_joints}, M={cfg.num_instances})")
        if training and rng is None and (cfg.head_dropout > 0 or cfg.unit_dropout > 0):
            raise ValidationError("training-mode forward needs a random source for dropout")
        h = Tensor(x)
        if cfg.input_batch_norm:
            h = ops.transpose(h, (0, 1, 3, 4, 2))              # (N, C, V, M, T)
            h = ops.reshape(h, (n, c * v * m, t, 1))
            h = self._bn(h, "input_bn", training)
            h = ops.reshape(h, (n, c, v, m, t))
            h = ops.transpose(h, (0, 1, 4, 2, 3))              # (N, C, T, V, M)
        h = ops.transpose(h, (0, 4, 1, 2, 3))                  # (N, M, C, T, V)
        h = ops.reshape(h, (n * m, c, t, v))
        for i, plan in enumerate(_unit_plan(cfg), start=1):
            h = self._unit(h, i, plan, training, rng)
            if not np.all(np.isfinite(h.data)):
                raise NumericalError(f"non-finite activation in unit {i}")
        h = ops.global_avg_pool(h)                             # (N*M, C')
        h = ops.reshape(h, (n, m, cfg.channels[-1]))
        h = ops.mean(h, axis=(1,))                             # (N, C')
        if cfg.head_dropout > 0:
            h = ops.dropout(h, 1.0 - cfg.head_dropout, rng, training)
        p = self.params.tensors
        return ops.linear(h, p["head.weight"], p["head.bias"])

    def predict_logits(self, batch: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode logits for any number of samples, in batches."""
        x = np.asarray(batch, dtype=np.float64)
        outs = []
        for i in range(0, x.shape[0], batch_size):
            outs.append(self.logits(x[i: i + batch_size], training=False).data)
        return np.concatenate(outs, axis=0)


def params_to_bytes(params: StgcnParams) -> bytes:
    """Serialize to the versioned binary container described above."""
    chunks = [PARAMS_MAGIC, struct.pack("<I", PARAMS_VERSION)]
    cfg = params.config.canonical_json().encode()
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    entries = [(0, n, t.data) for n, t in params.tensors.items()]
    entries += [(1, n, b) for n, b in params.buffers.items()]
    chunks.append(struct.pack("<I", len(entries)))
    for kind, name, arr in entries:
        nb = name.encode()
        chunks.append(struct.pack("<BH", kind, len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(chunks)
    return payload + hashlib.sha256(payload).digest()


def save_params(params: StgcnParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ValidationError(f"{self.path}: truncated parameter container")
        out = self.blob[self.off: self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def params_from_bytes(blob: bytes, expected_config: ModelConfig | None = None,
                      path="<bytes>") -> StgcnParams:
    """Parse a parameter container; rejects corruption and config mismatch."""
    if len(blob) < len(PARAMS_MAGIC) + 36:
        raise ValidationError(f"{path}: not a parameter container")
    payload, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise ValidationError(f"{path}: checksum mismatch, file is corrupted")
    r = _Reader(payload, path)
    if r.take(len(PARAMS_MAGIC)) != PARAMS_MAGIC:
        raise ValidationError(f"{path}: bad magic, not a parameter container")
    (version,) = r.unpack("<I")
    if version != PARAMS_VERSION:
        raise ValidationError(
            f"{path}: container version {version}, this build reads {PARAMS_VERSION}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ValidationError(f"{path}: unreadable embedded config") from exc
    if expected_config is not None and config != expected_config:
        theirs, ours = config.to_dict(), expected_config.to_dict()
        diff = sorted(k for k in ours if ours[k] != theirs.get(k))
        raise ValidationError(
            f"{path}: config mismatch on {', '.join(diff)} "
            f"(file {[theirs.get(k) for k in diff]}, expected {[ours[k] for k in diff]})")
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    kinds: dict[str, int] = {}
    for _ in range(count):
        kind, name_len = r.unpack("<BH")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * n_items), dtype="<f8").reshape(shape).astype(np.float64)
        arrays[name] = arr
        kinds[name] = kind
    t_struct, b_struct = _structure(config)
    expected = {n: (0, s) for n, s in t_struct} | {n: (1, s) for n, s in b_struct}
    if set(arrays) != set(expected):
        raise ValidationError(f"{path}: parameter names do not match the embedded config")
    for name, (kind, shape) in expected.items():
        if kinds[name] != kind or arrays[name].shape != tuple(shape):
            raise ValidationError(f"{path}: entry {name!r} has the wrong kind or shape")
    tensors = {n: Tensor(arrays[n], name=n) for n, _ in t_struct}
    buffers = {n: arrays[n].copy() for n, _ in b_struct}
    return StgcnParams(config, tensors, buffers)


def load_params(path, expected_config: ModelConfig | None = None) -> StgcnParams:
    return params_from_bytes(Path(path).read_bytes(), expected_config, path)
