"""Ske2Grid convolution network and the graph-convolution baselines.

Every block is ``spatial → bn1 → relu → temporal → bn2 (+ residual) → relu``.
The three model kinds share everything except the spatial operator:

* ``ske2grid``      K×K convolution on the H×W grid patch (one shared kernel)
* ``gcn-baseline``  node-specific graph convolution on the skeleton graph
* ``gcn-grid``      node-specific graph convolution on the grid lattice

Parameter names (``block{k}.spatial.weight``, ``head.bias``, ...) are the
checkpoint contract; the ske2grid kind has no parameter whose shape depends
on the grid size, so weights move freely between grids.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, LoadError
from .functional import (
    batchnorm,
    conv2d_same,
    global_avg_pool,
    graph_conv,
    linear,
    relu,
    temporal_conv,
    temporal_output_length,
)
from .skeleton import SkeletonGraph, grid_graph
from .tensor import Tensor, resolve_dtype
from .transform import GridSize, PlsCascade, cascade_forward

logger = logging.getLogger("ske2grid.network")

MODEL_KINDS = ("ske2grid", "gcn-baseline", "gcn-grid")


# --- module plumbing ------------------------------------------------------------


@dataclass
class LoadReport:
    loaded: List[str] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)
    unexpected: List[str] = field(default_factory=list)
    conflicts: List[Tuple[str, Tuple[int, ...], Tuple[int, ...]]] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.missing or self.conflicts)


class Module:
    """Named parameters (trainable tensors), buffers (plain arrays) and child modules."""

    def __init__(self) -> None:
        self.training = True
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, value: Tensor) -> Tensor:
        value.requires_grad = True
        value.name = name
        self._params[name] = value
        return value

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {f"{prefix}{name}": p for name, p in self._params.items()}
        for child_name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{child_name}."))
        return out

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {f"{prefix}{name}": b for name, b in self._buffers.items()}
        for child_name, child in self._children.items():
            out.update(child.named_buffers(f"{prefix}{child_name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> LoadReport:
        """Copy matching arrays in place; shape conflicts are never loaded."""
        report = LoadReport()
        params = self.named_parameters()
        buffers = self.named_buffers()
        for name in list(params) + list(buffers):
            if name not in state:
                report.missing.append(name)
                continue
            target = params[name].data if name in params else buffers[name]
            value = np.asarray(state[name])
            if value.shape != target.shape:
                report.conflicts.append((name, target.shape, value.shape))
                continue
            target[...] = value.astype(target.dtype, copy=False)
            report.loaded.append(name)
        known = set(params) | set(buffers)
        report.unexpected = sorted(name for name in state if name not in known)
        if strict and not report.clean:
            name = report.conflicts[0][0] if report.conflicts else report.missing[0]
            raise LoadError(
                f"{len(report.missing)} missing and {len(report.conflicts)} conflicting tensors",
                name,
            )
        return report

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), dtype)


class Conv2d(Module):
    """K×K same-padded convolution applied to every frame of ``[B, C, T, H, W]``."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, dtype) -> None:
        super().__init__()
        self.weight = self.add_parameter(
            "weight", _he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel, dtype)
        )
        self.bias = self.add_parameter("bias", Tensor(np.zeros(cout), dtype))

    def forward(self, x: Tensor) -> Tensor:
        b, c, t, h, w = x.shape
        frames = x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        out = conv2d_same(frames, self.weight, self.bias)
        return out.reshape(b, t, -1, h, w).permute(0, 2, 1, 3, 4)


class GraphConv(Module):
    """Node-specific weights on a fixed adjacency; nodes are the row-major grid cells."""

    def __init__(
        self, cin: int, cout: int, adjacency: np.ndarray, rng: np.random.Generator, dtype
    ) -> None:
        super().__init__()
        self.adjacency = np.asarray(adjacency)
        n_edges = int(np.count_nonzero(self.adjacency))
        fan_in = cin * max(1, int(self.adjacency.sum(axis=1).max()))
        self.weight = self.add_parameter(
            "weight", _he_normal(rng, (n_edges, cout, cin), fan_in, dtype)
        )
        self.bias = self.add_parameter("bias", Tensor(np.zeros(cout), dtype))

    def forward(self, x: Tensor) -> Tensor:
        b, c, t, h, w = x.shape
        if h * w != self.adjacency.shape[0]:
            raise DimensionError(
                f"graph convolution over {self.adjacency.shape[0]} nodes got a {h}x{w} input"
            )
        out = graph_conv(x.reshape(b, c, t, h * w), self.weight, self.adjacency, self.bias)
        return out.reshape(b, -1, t, h, w)


class TemporalConv(Module):
    def __init__(
        self, cin: int, cout: int, kernel: int, stride: int, rng: np.random.Generator, dtype
    ) -> None:
        super().__init__()
        self.stride = stride
        self.weight = self.add_parameter(
            "weight", _he_normal(rng, (cout, cin, kernel), cin * kernel, dtype)
        )
        self.bias = self.add_parameter("bias", Tensor(np.zeros(cout), dtype))

    def forward(self, x: Tensor) -> Tensor:
        return temporal_conv(x, self.weight, self.stride, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype) -> None:
        super().__init__()
        self.gamma = self.add_parameter("gamma", Tensor(np.ones(channels), dtype))
        self.beta = self.add_parameter("beta", Tensor(np.zeros(channels), dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training
        )


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, dtype) -> None:
        super().__init__()
        bound = 1.0 / np.sqrt(din)
        self.weight = self.add_parameter(
            "weight", Tensor(rng.uniform(-bound, bound, size=(dout, din)), dtype)
        )
        self.bias = self.add_parameter("bias", Tensor(np.zeros(dout), dtype))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# --- configuration --------------------------------------------------------------


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    spatial_kernel: int = 3
    temporal_kernel: int = 9
    temporal_stride: int = 1
    residual: bool = True

    def validate(self, index: int) -> None:
        key = f"model.block{index}"
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive", key)
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial kernel {self.spatial_kernel} must be odd", key)
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal kernel {self.temporal_kernel} must be odd", key)
        if self.temporal_stride not in (1, 2):
            raise ConfigError(f"temporal stride {self.temporal_stride} must be 1 or 2", key)

    @property
    def needs_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.temporal_stride != 1


MODEL_PRESETS: Dict[str, Tuple[List[int], Tuple[int, ...]]] = {
    "default": ([64, 64, 128, 128, 256, 256], (3, 5)),
    "small": ([16, 16, 32, 32], (3,)),
}


@dataclass
class ModelConfig:
    blocks: List[BlockConfig]
    grid: GridSize
    n_classes: int
    in_channels: int = 3

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("the model needs at least one block", "model.preset")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}", "model.n_classes")
        expected = self.in_channels
        for k, block in enumerate(self.blocks, start=1):
            block.validate(k)
            if block.in_channels != expected:
                raise ConfigError(
                    f"block {k} takes {block.in_channels} channels but receives {expected}",
                    f"model.block{k}",
                )
            expected = block.out_channels

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].out_channels

    def output_frames(self, frames: int) -> int:
        for block in self.blocks:
            frames = temporal_output_length(frames, block.temporal_stride)
        return frames

    def to_dict(self) -> Dict[str, object]:
        return {
            "blocks": [vars(b).copy() for b in self.blocks],
            "grid": [self.grid.height, self.grid.width],
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelConfig":
        return cls(
            blocks=[BlockConfig(**b) for b in data["blocks"]],
            grid=GridSize(*data["grid"]),
            n_classes=int(data["n_classes"]),
            in_channels=int(data.get("in_channels", 3)),
        )

    @classmethod
    def preset(
        cls,
        name: str,
        grid: GridSize,
        n_classes: int,
        spatial_kernel: int = 3,
        temporal_kernel: int = 9,
        in_channels: int = 3,
    ) -> "ModelConfig":
        """Channel stack of a named preset; block 1 has no residual, as in ST-GCN."""
        if name not in MODEL_PRESETS:
            raise ConfigError(
                f"unknown model preset '{name}' ({', '.join(MODEL_PRESETS)})", "model.preset"
            )
        channels, stride_blocks = MODEL_PRESETS[name]
        blocks = []
        cin = in_channels
        for k, cout in enumerate(channels, start=1):
            blocks.append(
                BlockConfig(
                    in_channels=cin,
                    out_channels=cout,
                    spatial_kernel=spatial_kernel,
                    temporal_kernel=temporal_kernel,
                    temporal_stride=2 if k in stride_blocks else 1,
                    residual=k > 1,
                )
            )
            cin = cout
        return cls(blocks=blocks, grid=grid, n_classes=n_classes, in_channels=in_channels)


# --- blocks and models ------------------------------------------------------------


class Block(Module):
    def __init__(
        self,
        cfg: BlockConfig,
        spatial: Module,
        rng: np.random.Generator,
        dtype,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.spatial = self.add_module("spatial", spatial)
        self.bn1 = self.add_module("bn1", BatchNorm(cfg.out_channels, dtype))
        self.temporal = self.add_module(
            "temporal",
            TemporalConv(
                cfg.out_channels,
                cfg.out_channels,
                cfg.temporal_kernel,
                cfg.temporal_stride,
                rng,
                dtype,
            ),
        )
        self.bn2 = self.add_module("bn2", BatchNorm(cfg.out_channels, dtype))
        self.residual: Optional[TemporalConv] = None
        if cfg.residual and cfg.needs_projection:
            self.residual = self.add_module(
                "residual",
                TemporalConv(cfg.in_channels, cfg.out_channels, 1, cfg.temporal_stride, rng, dtype),
            )

    def forward(self, x: Tensor) -> Tensor:
        return ske2grid_block_forward(x, self)


def ske2grid_block_forward(x: Tensor, block: Block) -> Tensor:
    """``relu(bn2(temporal(relu(bn1(spatial(x))))) + residual(x))``; H and W never change."""
    if x.ndim != 5 or x.shape[1] != block.cfg.in_channels:
        raise DimensionError(
            f"block expects [B, {block.cfg.in_channels}, T, H, W], got {x.shape}"
        )
    y = relu(block.bn1(block.spatial(x)))
    y = block.bn2(block.temporal(y))
    if block.residual is not None:
        y = y + block.residual(x)
    elif block.cfg.residual:
        y = y + x
    return relu(y)


class Model(Module):
    """Block stack, global average pooling and a linear classifier over ``[B, C, T, H, W]``."""

    def __init__(
        self,
        cfg: ModelConfig,
        kind: str,
        adjacency: Optional[np.ndarray],
        seed: int,
        dtype,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.kind = kind
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.blocks: List[Block] = []
        for k, block_cfg in enumerate(cfg.blocks, start=1):
            if kind == "ske2grid":
                spatial: Module = Conv2d(
                    block_cfg.in_channels, block_cfg.out_channels, block_cfg.spatial_kernel, rng, dtype
                )
            else:
                spatial = GraphConv(
                    block_cfg.in_channels, block_cfg.out_channels, adjacency, rng, dtype
                )
            self.blocks.append(self.add_module(f"block{k}", Block(block_cfg, spatial, rng, dtype)))
        self.head = self.add_module("head", Linear(cfg.feature_channels, cfg.n_classes, rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[3:] != tuple(self.cfg.grid):
            raise DimensionError(
                f"model expects [B, C, T, {self.cfg.grid.height}, {self.cfg.grid.width}], "
                f"got {x.shape}"
            )
        for block in self.blocks:
            x = block(x)
        return self.head(global_avg_pool(x))


def build_model(
    cfg: ModelConfig,
    kind: str = "ske2grid",
    graph: Optional[SkeletonGraph] = None,
    seed: int = 0,
    dtype: str = "f32",
) -> Model:
    """Instantiate a model; ``gcn-baseline`` reads its nodes as a 1×N grid of ``graph``."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind '{kind}' ({', '.join(MODEL_KINDS)})", "model.kind")
    cfg.validate()
    adjacency = None
    if kind == "gcn-baseline":
        if graph is None:
            raise ConfigError("the graph-convolution baseline needs a skeleton graph", "model.kind")
        if tuple(cfg.grid) != (1, graph.n_joints):
            raise ConfigError(
                f"baseline grid must be 1x{graph.n_joints}, got {cfg.grid}", "model.kind"
            )
        adjacency = graph.adjacency
    elif kind == "gcn-grid":
        adjacency = grid_graph(cfg.grid.height, cfg.grid.width).adjacency
    model = Model(cfg, kind, adjacency, seed, resolve_dtype(dtype))
    logger.debug(f"Built {kind} model with {count_parameters(model)} parameters")
    return model


def parameter_manifest(module: Module) -> List[Tuple[str, Tuple[int, ...], int]]:
    return [(name, p.shape, int(p.data.size)) for name, p in module.named_parameters().items()]


def count_parameters(module: Module) -> int:
    return sum(size for _, _, size in parameter_manifest(module))


class Recognizer:
    """Skeleton sequences in, class logits out: transform cascade plus network."""

    def __init__(
        self,
        graph: SkeletonGraph,
        model: Model,
        cascade: Optional[PlsCascade] = None,
        normalize_adjacency: bool = False,
    ) -> None:
        if model.kind != "gcn-baseline" and cascade is None:
            raise ConfigError(f"a {model.kind} model needs a transform cascade", "model.kind")
        if cascade is not None and cascade.grid != model.cfg.grid:
            raise ConfigError(
                f"cascade ends on a {cascade.grid} grid but the model expects {model.cfg.grid}",
                "grid",
            )
        self.graph = graph
        self.model = model
        self.cascade = cascade
        self.normalize_adjacency = normalize_adjacency
        self.regulation = graph.regulation_matrix(normalize_adjacency, model.dtype)
        self.training = True

    @property
    def dtype(self):
        return self.model.dtype

    def train(self, mode: bool = True) -> "Recognizer":
        self.training = mode
        self.model.train(mode)
        if not mode and self.cascade is not None:
            self.cascade.refresh_phi()
        return self

    def eval(self) -> "Recognizer":
        return self.train(False)

    def named_parameters(self, trainable_only: bool = True) -> Dict[str, Tensor]:
        params = dict(self.model.named_parameters())
        if self.cascade is not None:
            params.update(self.cascade.named_parameters(trainable_only))
        return params

    def zero_grad(self) -> None:
        self.model.zero_grad()
        if self.cascade is not None:
            for p in self.cascade.named_parameters().values():
                p.grad = None

    def to_grid(self, x: Tensor) -> Tensor:
        """``[B, T, N, C]`` → ``[B, C, T, H, W]``."""
        if self.cascade is None:
            b, t, n, c = x.shape
            return x.permute(0, 3, 1, 2).reshape(b, c, t, 1, n)
        return cascade_forward(self.cascade, self.regulation, x, self.training).permute(
            0, 2, 1, 3, 4
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] != self.graph.n_joints:
            raise DimensionError(
                f"expected skeleton batch [B, T, {self.graph.n_joints}, C], got {x.shape}"
            )
        return self.model(self.to_grid(x))

    __call__ = forward
