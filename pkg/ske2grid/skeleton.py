"""Skeleton graphs, skeleton sequences, a synthetic action generator and the dataset file format.

Dataset file layout (all integers little-endian u32)::

    "SKDS" | version=1 | N | C | n_sequences
    per sequence: T | label | T·N·C float32 values
    manifest: u32 length | UTF-8 JSON
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .binio import BinaryReader, BinaryWriter
from .errors import ConfigError, DataError, FormatError

logger = logging.getLogger("ske2grid.skeleton")

DATASET_MAGIC = b"SKDS"
DATASET_VERSION = 1
CHANNELS = 3

Edge = Tuple[int, int]

# NTU RGB+D joint tree (0-indexed): spine base is joint 0, spine shoulder joint 20.
_NTU25_EDGES: List[Edge] = [
    (0, 1), (1, 20), (2, 20), (3, 2), (4, 20), (5, 4), (6, 5), (7, 6),
    (8, 20), (9, 8), (10, 9), (11, 10), (12, 0), (13, 12), (14, 13), (15, 14),
    (16, 0), (17, 16), (18, 17), (19, 18), (21, 22), (22, 7), (23, 24), (24, 11),
]  # fmt: skip
_NTU25_NAMES = [
    "spine_base", "spine_mid", "neck", "head", "left_shoulder", "left_elbow", "left_wrist",
    "left_hand", "right_shoulder", "right_elbow", "right_wrist", "right_hand", "left_hip",
    "left_knee", "left_ankle", "left_foot", "right_hip", "right_knee", "right_ankle",
    "right_foot", "spine_shoulder", "left_hand_tip", "left_thumb", "right_hand_tip",
    "right_thumb",
]  # fmt: skip

# COCO keypoint tree as used for 2D estimated skeletons.
_COCO17_EDGES: List[Edge] = [
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 5), (12, 6), (9, 7), (7, 5),
    (10, 8), (8, 6), (5, 0), (6, 0), (1, 0), (3, 1), (2, 0), (4, 2),
]  # fmt: skip
_COCO17_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip",
    "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle",
]  # fmt: skip

BUILTIN_SKELETONS = ("chain17", "star9", "ntu25-like", "coco17")


@dataclass(frozen=True)
class SkeletonGraph:
    """Joints plus undirected bones; ``adjacency`` is binary with optional unit diagonal."""

    name: str
    n_joints: int
    edges: Tuple[Edge, ...]
    joint_names: Tuple[str, ...] = ()
    self_loops: bool = True

    def __post_init__(self) -> None:
        normalized = []
        for i, j in self.edges:
            if not (0 <= i < self.n_joints and 0 <= j < self.n_joints) or i == j:
                raise ConfigError(f"invalid edge ({i}, {j}) for {self.n_joints} joints", "graph")
            normalized.append((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", tuple(sorted(set(normalized))))
        if self.joint_names and len(self.joint_names) != self.n_joints:
            raise ConfigError(
                f"{len(self.joint_names)} joint names for {self.n_joints} joints", "graph"
            )

    @property
    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_joints, self.n_joints), dtype=np.uint8)
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1
        if self.self_loops:
            np.fill_diagonal(A, 1)
        return A

    def regulation_matrix(self, normalize: bool = False, dtype: Any = np.float64) -> np.ndarray:
        """The prior topology used by adjacency-regulated up-sampling (row-normalized if asked)."""
        A = self.adjacency.astype(dtype)
        if normalize:
            degree = A.sum(axis=1, keepdims=True)
            A = np.divide(A, degree, out=np.zeros_like(A), where=degree > 0)
        return A

    def degree(self, joint: int) -> int:
        return sum(1 for i, j in self.edges if joint in (i, j))

    def joint_label(self, joint: int) -> str:
        return self.joint_names[joint] if self.joint_names else f"j{joint}"

    def with_self_loops(self, enabled: bool) -> "SkeletonGraph":
        return SkeletonGraph(self.name, self.n_joints, self.edges, self.joint_names, enabled)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "n_joints": self.n_joints,
            "edges": [list(e) for e in self.edges],
            "joint_names": list(self.joint_names),
            "self_loops": self.self_loops,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SkeletonGraph":
        return cls(
            name=data["name"],
            n_joints=int(data["n_joints"]),
            edges=tuple((int(i), int(j)) for i, j in data["edges"]),
            joint_names=tuple(data.get("joint_names", ())),
            self_loops=bool(data.get("self_loops", True)),
        )


def builtin_skeleton(name: str, self_loops: bool = True) -> SkeletonGraph:
    """Return one of the built-in graphs: chain17, star9, ntu25-like, coco17."""
    if name == "chain17":
        return SkeletonGraph(name, 17, tuple((i, i + 1) for i in range(16)), (), self_loops)
    if name == "star9":
        return SkeletonGraph(name, 9, tuple((0, i) for i in range(1, 9)), (), self_loops)
    if name == "ntu25-like":
        return SkeletonGraph(name, 25, tuple(_NTU25_EDGES), tuple(_NTU25_NAMES), self_loops)
    if name == "coco17":
        return SkeletonGraph(name, 17, tuple(_COCO17_EDGES), tuple(_COCO17_NAMES), self_loops)
    raise ConfigError(
        f"unknown skeleton '{name}'; choose one of {', '.join(BUILTIN_SKELETONS)}", "dataset.graph"
    )


def grid_graph(height: int, width: int, self_loops: bool = True) -> SkeletonGraph:
    """Lattice whose nodes are grid cells (row-major) joined to their 4-neighbours."""
    edges = []
    for r in range(height):
        for c in range(width):
            cell = r * width + c
            if c + 1 < width:
                edges.append((cell, cell + 1))
            if r + 1 < height:
                edges.append((cell, cell + width))
    return SkeletonGraph(f"grid{height}x{width}", height * width, tuple(edges), (), self_loops)


def rest_pose(graph: SkeletonGraph) -> np.ndarray:
    """Deterministic 2-D layout (z = 0): BFS depth from joint 0 sets y, order within depth sets x."""
    neighbours: Dict[int, List[int]] = {j: [] for j in range(graph.n_joints)}
    for i, j in graph.edges:
        neighbours[i].append(j)
        neighbours[j].append(i)
    depth = {0: 0}
    queue = deque([0])
    while queue:
        joint = queue.popleft()
        for nb in sorted(neighbours[joint]):
            if nb not in depth:
                depth[nb] = depth[joint] + 1
                queue.append(nb)
    deepest = max(depth.values())
    for joint in range(graph.n_joints):
        depth.setdefault(joint, deepest + 1)
    pose = np.zeros((graph.n_joints, CHANNELS), dtype=np.float64)
    levels: Dict[int, List[int]] = {}
    for joint in range(graph.n_joints):
        levels.setdefault(depth[joint], []).append(joint)
    for level, joints in levels.items():
        for rank, joint in enumerate(joints):
            pose[joint, 0] = (rank - (len(joints) - 1) / 2.0) * 0.5
            pose[joint, 1] = -0.25 * level
    return pose


@dataclass
class SkeletonSequence:
    """One action clip: ``frames`` is (T, N, 3) float32.

    2-D keypoints given without scores get a zero third channel.
    """

    frames: np.ndarray
    label: int
    meta: str = ""

    def __post_init__(self) -> None:
        if self.frames.ndim == 3 and self.frames.shape[2] == 2:
            self.frames = ensure_three_channels(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[2] != CHANNELS:
            raise DataError(f"{self.meta or 'sequence'}: frames must be (T, N, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"{self.meta or 'sequence'}: NaN or Inf coordinates")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def check_confidence(self) -> None:
        """For 2-D sources the third channel is a confidence score in [0, 1]."""
        scores = self.frames[..., 2]
        if scores.min() < 0.0 or scores.max() > 1.0:
            raise DataError(f"{self.meta or 'sequence'}: confidence outside [0, 1]")


def ensure_three_channels(frames: np.ndarray) -> np.ndarray:
    """Zero-fill the third channel of 2-D keypoints that come without scores."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.shape[-1] == CHANNELS:
        return frames
    if frames.shape[-1] == 2:
        return np.concatenate([frames, np.zeros(frames.shape[:-1] + (1,), np.float32)], axis=-1)
    raise DataError(f"expected 2 or 3 channels per joint, got {frames.shape[-1]}")


def harmonize_length(frames: np.ndarray, n_frames: int) -> np.ndarray:
    """Center-crop longer clips; pad shorter ones by repeating edge frames on both sides."""
    length = frames.shape[0]
    if length == n_frames:
        return frames
    if length > n_frames:
        start = (length - n_frames) // 2
        return frames[start : start + n_frames]
    before = (n_frames - length) // 2
    after = n_frames - length - before
    return np.pad(frames, ((before, after), (0, 0), (0, 0)), mode="edge")


@dataclass
class DatasetManifest:
    class_names: List[str]
    train_indices: List[int]
    val_indices: List[int]
    generator: Dict[str, Any] = field(default_factory=dict)
    graph: Dict[str, Any] = field(default_factory=dict)
    # "2d": x, y and a confidence score per joint; "3d": x, y, z
    coordinates: str = "3d"

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def validate(self, labels: Sequence[int]) -> None:
        if self.coordinates not in ("2d", "3d"):
            raise DataError(f"unknown coordinate kind '{self.coordinates}' (2d, 3d)")
        train, val = set(self.train_indices), set(self.val_indices)
        if train & val:
            raise DataError(f"train/val splits overlap at {sorted(train & val)[:5]}")
        for split, idx in (("train", train), ("val", val)):
            if any(i < 0 or i >= len(labels) for i in idx):
                raise DataError(f"{split} split references a sequence that does not exist")
            present = {labels[i] for i in idx}
            missing = [c for c in range(self.n_classes) if c not in present]
            if missing:
                raise DataError(f"{split} split has no sequences for classes {missing}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "class_names": list(self.class_names),
            "train_indices": list(map(int, self.train_indices)),
            "val_indices": list(map(int, self.val_indices)),
            "generator": self.generator,
            "graph": self.graph,
            "coordinates": self.coordinates,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        return cls(
            class_names=list(data["class_names"]),
            train_indices=[int(i) for i in data["train_indices"]],
            val_indices=[int(i) for i in data["val_indices"]],
            generator=dict(data.get("generator", {})),
            graph=dict(data.get("graph", {})),
            coordinates=str(data.get("coordinates", "3d")),
        )


@dataclass
class SkeletonDataset:
    """Sequences, their manifest and the graph they live on."""

    graph: SkeletonGraph
    sequences: List[SkeletonSequence]
    manifest: DatasetManifest

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    def split(self, name: str) -> List[SkeletonSequence]:
        if name == "train":
            return [self.sequences[i] for i in self.manifest.train_indices]
        if name == "val":
            return [self.sequences[i] for i in self.manifest.val_indices]
        if name == "all":
            return list(self.sequences)
        raise ConfigError(f"unknown split '{name}' (train, val, all)", "split")


# --- synthetic generator -------------------------------------------------------


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs of the parametric motion generator (amplitudes in rest-pose units)."""

    noise: float = 0.0
    amplitude: float = 0.3
    active_joints: int = 6
    amplitude_jitter: float = 0.1
    phase_jitter: float = 0.0
    val_fraction: float = 0.2


GENERATOR_PRESETS: Dict[str, GeneratorParams] = {
    "clean": GeneratorParams(noise=0.0),
    "moderate": GeneratorParams(noise=0.15, phase_jitter=0.2),
    "hard": GeneratorParams(noise=0.45, active_joints=3, amplitude_jitter=0.3, phase_jitter=0.6),
}


def generator_preset(name: str) -> GeneratorParams:
    try:
        return GENERATOR_PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown generator preset '{name}' ({', '.join(GENERATOR_PRESETS)})", "dataset.preset"
        ) from None


def generate_synthetic(
    graph: SkeletonGraph,
    n_classes: int,
    n_per_class: int,
    T: int,
    noise: Optional[float] = None,
    seed: int = 0,
    params: Optional[GeneratorParams] = None,
) -> Tuple[List[SkeletonSequence], DatasetManifest]:
    """Generate per-class sinusoidal joint motions around the graph's rest pose.

    Class ``c`` oscillates a class-specific subset of joints at ``c + 1``
    cycles per clip, each joint with its own direction and phase. Samples
    differ by an amplitude factor, a global phase shift and Gaussian noise.
    """
    params = params or GeneratorParams()
    if noise is None:
        noise = params.noise
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}", "dataset.n_classes")
    if T < 8:
        raise ConfigError(f"need at least 8 frames, got {T}", "dataset.frames")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}", "dataset.noise")
    if n_per_class < 2:
        raise ConfigError(
            f"need at least 2 sequences per class for a train/val split, got {n_per_class}",
            "dataset.n_per_class",
        )

    rng = np.random.default_rng(seed)
    rest = rest_pose(graph)
    n_active = min(params.active_joints, graph.n_joints)
    t = np.arange(T, dtype=np.float64)

    class_motion = []
    for c in range(n_classes):
        joints = np.sort(rng.choice(graph.n_joints, size=n_active, replace=False))
        directions = rng.normal(size=(n_active, CHANNELS))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_active)
        class_motion.append((joints, directions, phases, float(c + 1)))

    sequences: List[SkeletonSequence] = []
    for c, (joints, directions, phases, cycles) in enumerate(class_motion):
        for k in range(n_per_class):
            scale = params.amplitude * rng.uniform(
                1.0 - params.amplitude_jitter, 1.0 + params.amplitude_jitter
            )
            shift = rng.normal(0.0, params.phase_jitter) if params.phase_jitter > 0 else 0.0
            frames = np.repeat(rest[None], T, axis=0)
            wave = np.sin(2.0 * np.pi * cycles * t[:, None] / T + phases[None, :] + shift)
            frames[:, joints, :] += scale * wave[:, :, None] * directions[None, :, :]
            if noise > 0:
                frames += rng.normal(0.0, noise, size=frames.shape)
            sequences.append(
                SkeletonSequence(frames.astype(np.float32), c, meta=f"synthetic/c{c}/s{k}")
            )

    train, val = _stratified_split(
        [s.label for s in sequences], n_classes, params.val_fraction, rng
    )
    manifest = DatasetManifest(
        class_names=[f"action_{c}" for c in range(n_classes)],
        train_indices=train,
        val_indices=val,
        generator={
            "seed": seed,
            "n_classes": n_classes,
            "n_per_class": n_per_class,
            "frames": T,
            "noise": float(noise),
            "amplitude": params.amplitude,
            "active_joints": n_active,
            "amplitude_jitter": params.amplitude_jitter,
            "phase_jitter": params.phase_jitter,
            "val_fraction": params.val_fraction,
        },
        graph=graph.to_dict(),
    )
    manifest.validate([s.label for s in sequences])
    logger.debug(
        f"Generated {len(sequences)} sequences on {graph.name} "
        f"({n_classes} classes, T={T}, noise={noise})"
    )
    return sequences, manifest


def _stratified_split(
    labels: Sequence[int], n_classes: int, val_fraction: float, rng: np.random.Generator
) -> Tuple[List[int], List[int]]:
    train: List[int] = []
    val: List[int] = []
    labels = np.asarray(labels)
    for c in range(n_classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_val = min(max(1, int(round(val_fraction * len(members)))), len(members) - 1)
        val.extend(int(i) for i in members[:n_val])
        train.extend(int(i) for i in members[n_val:])
    return sorted(train), sorted(val)


def nearest_centroid_accuracy(
    sequences: Sequence[SkeletonSequence], manifest: DatasetManifest
) -> float:
    """Validation accuracy of a nearest-class-mean classifier on flattened clips."""
    train = [sequences[i] for i in manifest.train_indices]
    val = [sequences[i] for i in manifest.val_indices]
    if not val:
        raise ConfigError("validation split is empty", "split")
    flat = np.stack([s.frames.reshape(-1) for s in train]).astype(np.float64)
    labels = np.array([s.label for s in train])
    centroids = np.stack([flat[labels == c].mean(axis=0) for c in range(manifest.n_classes)])
    queries = np.stack([s.frames.reshape(-1) for s in val]).astype(np.float64)
    distances = ((queries[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    predictions = distances.argmin(axis=1)
    return float(np.mean(predictions == np.array([s.label for s in val])))


# --- dataset file --------------------------------------------------------------


def save_dataset(
    path: Union[str, Path],
    sequences: Sequence[SkeletonSequence],
    manifest: DatasetManifest,
    n_joints: Optional[int] = None,
) -> Path:
    """Write the dataset file; returns the path written."""
    if n_joints is None:
        if sequences:
            n_joints = sequences[0].frames.shape[1]
        elif manifest.graph:
            n_joints = int(manifest.graph["n_joints"])
        else:
            raise ConfigError("cannot infer the joint count of an empty dataset", "dataset")
    writer = BinaryWriter()
    writer.raw(DATASET_MAGIC)
    writer.u32(DATASET_VERSION)
    writer.u32(n_joints)
    writer.u32(CHANNELS)
    writer.u32(len(sequences))
    for seq in sequences:
        if seq.frames.shape[1] != n_joints:
            raise DataError(f"{seq.meta}: {seq.frames.shape[1]} joints, dataset has {n_joints}")
        writer.u32(seq.n_frames)
        writer.u32(seq.label)
        writer.array(seq.frames, "<f4")
    writer.json(manifest.to_dict())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(writer.getvalue())
    logger.info(f"Wrote {len(sequences)} sequences to {path}")
    return path


def load_dataset(path: Union[str, Path]) -> Tuple[List[SkeletonSequence], DatasetManifest]:
    """Read a dataset file written by :func:`save_dataset`."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}", "dataset.path")
    reader = BinaryReader(path.read_bytes(), "skeleton dataset")
    reader.magic(DATASET_MAGIC)
    version_at = reader.offset
    version = reader.u32("version")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", version_at)
    n_joints = reader.u32("N")
    channels_at = reader.offset
    channels = reader.u32("C")
    if channels != CHANNELS:
        raise FormatError(f"expected C={CHANNELS}, file declares C={channels}", channels_at)
    count = reader.u32("n_sequences")
    sequences = []
    offsets = []
    for index in range(count):
        frames_at = reader.offset
        offsets.append(frames_at)
        n_frames = reader.u32(f"sequence {index} T")
        label = reader.u32(f"sequence {index} label")
        if n_frames == 0:
            raise FormatError(f"sequence {index} has zero frames", frames_at)
        values = reader.array(n_frames * n_joints * channels, "<f4", f"sequence {index} frames")
        frames = values.reshape(n_frames, n_joints, channels).astype(np.float32)
        try:
            sequences.append(SkeletonSequence(frames, int(label), meta=f"{path.name}#{index}"))
        except DataError as exc:
            raise FormatError(str(exc), frames_at) from exc
    manifest_at = reader.offset
    manifest = DatasetManifest.from_dict(reader.json("manifest"))
    reader.expect_end()
    bad = [s.label for s in sequences if s.label >= manifest.n_classes]
    if bad:
        raise FormatError(f"labels {sorted(set(bad))} exceed the manifest's class list", manifest_at)
    try:
        manifest.validate([s.label for s in sequences])
    except DataError as exc:
        raise FormatError(str(exc), manifest_at) from exc
    if manifest.coordinates == "2d":
        for seq, frames_at in zip(sequences, offsets):
            try:
                seq.check_confidence()
            except DataError as exc:
                raise FormatError(str(exc), frames_at) from exc
    return sequences, manifest


def load_skeleton_dataset(path: Union[str, Path], self_loops: bool = True) -> SkeletonDataset:
    sequences, manifest = load_dataset(path)
    if not manifest.graph:
        raise ConfigError(f"{path} does not record its skeleton graph", "dataset.path")
    graph = SkeletonGraph.from_dict(manifest.graph).with_self_loops(self_loops)
    return SkeletonDataset(graph, sequences, manifest)
