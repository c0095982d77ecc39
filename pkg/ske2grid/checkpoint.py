"""Checkpoint file: metadata plus a named tensor table.

Layout (little-endian)::

    "SK2G" | u32 version=1 | u32 len + UTF-8 JSON metadata | u32 tensor count
    per tensor: u32 len + UTF-8 name | u8 dtype tag (0 f32, 1 f64) | u32 rank | u32 dims... | data

Tensors are written in sorted name order and the metadata JSON uses sorted
keys, so the same state always produces the same bytes.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from .binio import BinaryReader, BinaryWriter
from .errors import ConfigError, FormatError, LoadError
from .network import LoadReport, ModelConfig, Recognizer, build_model
from .skeleton import SkeletonGraph
from .tensor import dtype_name
from .transform import PlsCascade

logger = logging.getLogger("ske2grid.checkpoint")

CHECKPOINT_MAGIC = b"SK2G"
CHECKPOINT_VERSION = 1
DTYPE_TAGS = {0: "<f4", 1: "<f8"}


@dataclass
class Checkpoint:
    metadata: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage_names(self) -> list:
        return sorted(name for name in self.tensors if name.startswith("stage"))

    @property
    def network_names(self) -> list:
        return sorted(name for name in self.tensors if not name.startswith("stage"))


def _dtype_tag(array: np.ndarray) -> int:
    if array.dtype == np.float32:
        return 0
    if array.dtype == np.float64:
        return 1
    raise ConfigError(f"cannot store dtype {array.dtype} in a checkpoint", "dtype")


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    writer = BinaryWriter()
    writer.raw(CHECKPOINT_MAGIC)
    writer.u32(CHECKPOINT_VERSION)
    writer.json(checkpoint.metadata)
    writer.u32(len(checkpoint.tensors))
    for name in sorted(checkpoint.tensors):
        array = np.asarray(checkpoint.tensors[name])
        tag = _dtype_tag(array)
        writer.text(name)
        writer.u8(tag)
        writer.u32(array.ndim)
        for extent in array.shape:
            writer.u32(extent)
        writer.array(array, DTYPE_TAGS[tag])
    return writer.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = BinaryReader(data, "checkpoint")
    reader.magic(CHECKPOINT_MAGIC)
    version_at = reader.offset
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", version_at)
    metadata = reader.json("metadata")
    count = reader.u32("tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_at = reader.offset
        name = reader.text("tensor name")
        if name in tensors:
            raise FormatError(f"duplicate tensor '{name}'", name_at)
        tag_at = reader.offset
        tag = reader.u8(f"{name} dtype")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag} for '{name}'", tag_at)
        rank = reader.u32(f"{name} rank")
        shape = tuple(reader.u32(f"{name} dim") for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        values = reader.array(size, DTYPE_TAGS[tag], f"{name} data")
        tensors[name] = values.reshape(shape).astype(np.float32 if tag == 0 else np.float64)
    reader.expect_end()
    return Checkpoint(metadata, tensors)


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint {path} ({len(checkpoint.tensors)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}", "checkpoint")
    return decode_checkpoint(path.read_bytes())


# --- recognizers <-> checkpoints ----------------------------------------------------


def checkpoint_from(recognizer: Recognizer, metadata: Optional[Mapping[str, Any]] = None) -> Checkpoint:
    """Snapshot the network state and every cascade stage (Λ, Ψ and cached Φ)."""
    tensors = recognizer.model.state_dict()
    meta: Dict[str, Any] = dict(metadata or {})
    meta.update(
        {
            "kind": recognizer.model.kind,
            "dtype": dtype_name(recognizer.dtype),
            "graph": recognizer.graph.to_dict(),
            "model": recognizer.model.cfg.to_dict(),
            "grid": [recognizer.model.cfg.grid.height, recognizer.model.cfg.grid.width],
            "normalize_adjacency": recognizer.normalize_adjacency,
            "cascade": None,
            "frozen_stages": [],
        }
    )
    if recognizer.cascade is not None:
        tensors.update({name: a.copy() for name, a in recognizer.cascade.named_tensors().items()})
        meta["cascade"] = recognizer.cascade.describe()
        meta["frozen_stages"] = [f"stage{k}" for k in range(1, recognizer.cascade.frozen_prefix + 1)]
    return Checkpoint(meta, tensors)


def copy_transforms(cascade: PlsCascade, tensors: Mapping[str, np.ndarray], stage: int) -> bool:
    """Overwrite stage ``stage`` (1-based) with ``stage{k}.*`` tensors when present."""
    target = cascade.stages[stage - 1]
    params = target.named_parameters(f"stage{stage}")
    if not any(name in tensors for name in params):
        return False
    for name, tensor in params.items():
        if name not in tensors:
            raise LoadError("transform tensor missing from the source checkpoint", name)
        value = np.asarray(tensors[name])
        if value.shape != tensor.shape:
            raise LoadError(f"shape {value.shape} does not match {tensor.shape}", name)
        tensor.data[...] = value
    target.git.derive_phi()
    return True


def load_into(recognizer: Recognizer, checkpoint: Checkpoint) -> LoadReport:
    """Best-effort load: network tensors by name, cascade stages by stage name.

    Tensors absent from the checkpoint keep their fresh initialization.
    """
    report = recognizer.model.load_state_dict(checkpoint.tensors, strict=False)
    if recognizer.cascade is not None:
        for k, stage in enumerate(recognizer.cascade.stages, start=1):
            for name, tensor in stage.named_parameters(f"stage{k}").items():
                if name not in checkpoint.tensors:
                    report.missing.append(name)
                    continue
                value = checkpoint.tensors[name]
                if value.shape != tensor.shape:
                    report.conflicts.append((name, tensor.shape, value.shape))
                    continue
                tensor.data[...] = value
                report.loaded.append(name)
            stage.git.derive_phi()
    known = set(report.loaded) | set(report.missing) | {c[0] for c in report.conflicts}
    report.unexpected = sorted(
        name for name in checkpoint.tensors if name not in known and not name.endswith(".phi")
    )
    return report


def restore_recognizer(checkpoint: Checkpoint) -> Recognizer:
    """Rebuild the exact recognizer a checkpoint was taken from, in eval mode."""
    meta = checkpoint.metadata
    for key in ("kind", "graph", "model", "dtype"):
        if key not in meta:
            raise LoadError("checkpoint metadata is incomplete", key)
    graph = SkeletonGraph.from_dict(meta["graph"])
    model_cfg = ModelConfig.from_dict(meta["model"])
    model = build_model(model_cfg, meta["kind"], graph, 0, meta["dtype"])
    model.load_state_dict(checkpoint.tensors, strict=True)
    cascade = None
    if meta.get("cascade"):
        cascade = PlsCascade.from_description(meta["cascade"], meta["dtype"])
        for k, stage in enumerate(cascade.stages, start=1):
            for name, tensor in stage.named_parameters(f"stage{k}").items():
                if name not in checkpoint.tensors:
                    raise LoadError("stage tensor missing from checkpoint", name)
                value = checkpoint.tensors[name]
                if value.shape != tensor.shape:
                    raise LoadError(f"shape {value.shape} does not match {tensor.shape}", name)
                tensor.data[...] = value
    recognizer = Recognizer(graph, model, cascade, bool(meta.get("normalize_adjacency", False)))
    recognizer.eval()
    if cascade is not None:
        for k, stage in enumerate(cascade.stages, start=1):
            phi = checkpoint.tensors.get(f"stage{k}.phi")
            if phi is not None:
                stage.git.phi = np.asarray(phi, dtype=stage.git.psi.dtype)
    return recognizer


def load_recognizer(path: Union[str, Path]) -> Recognizer:
    return restore_recognizer(load_checkpoint(path))
