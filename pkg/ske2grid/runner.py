"""Glue between a resolved RunConfig and the library: datasets, schedules, training runs."""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .network import ModelConfig, Recognizer, build_model
from .skeleton import (
    SkeletonDataset,
    SkeletonGraph,
    builtin_skeleton,
    generate_synthetic,
    generator_preset,
    load_skeleton_dataset,
)
from .training import MetricRow, PlsResult, PlsSchedule, run_pls
from .transform import GridSize, build_cascade

logger = logging.getLogger("ske2grid.runner")


def graph_from_config(cfg: RunConfig) -> SkeletonGraph:
    return builtin_skeleton(cfg.dataset.graph, cfg.graph.self_loops)


def dataset_from_config(cfg: RunConfig) -> SkeletonDataset:
    """Load ``dataset.path`` or regenerate the synthetic set the config describes."""
    if cfg.dataset.path is not None:
        return load_skeleton_dataset(cfg.dataset.path, cfg.graph.self_loops)
    graph = graph_from_config(cfg)
    sequences, manifest = generate_synthetic(
        graph,
        cfg.dataset.n_classes,
        cfg.dataset.n_per_class,
        cfg.dataset.frames,
        noise=cfg.dataset.noise,
        seed=cfg.seed,
        params=generator_preset(cfg.dataset.preset),
    )
    return SkeletonDataset(graph, sequences, manifest)


def schedule_from_config(cfg: RunConfig, progressive: bool) -> PlsSchedule:
    """Every configured grid when ``progressive``, otherwise only the first one."""
    grids = cfg.grid.grids
    if not progressive or not cfg.ablation.pls:
        budgets = cfg.grid.stage_epochs[:1] if cfg.grid.stage_epochs else None
        return PlsSchedule(grids[:1], budgets)
    return PlsSchedule(grids, cfg.grid.stage_epochs)


def preview_recognizer(cfg: RunConfig, graph: SkeletonGraph, n_classes: int) -> Recognizer:
    """The stage-1 recognizer a run would start from, for parameter reports."""
    kind = cfg.model.kind
    grid = cfg.grid.grids[0] if kind != "gcn-baseline" else GridSize(1, graph.n_joints)
    model_cfg = ModelConfig.preset(
        cfg.model.preset, grid, n_classes, cfg.model.spatial_kernel, cfg.model.temporal_kernel
    )
    model = build_model(model_cfg, kind, graph, cfg.seed, cfg.dtype)
    cascade = None
    if kind != "gcn-baseline":
        cascade = build_cascade(graph.n_joints, [grid], cfg.seed, cfg.transform_options(), cfg.dtype)
    return Recognizer(graph, model, cascade, cfg.graph.normalize)


def validate_run(cfg: RunConfig, n_joints: int, progressive: bool) -> PlsSchedule:
    """Fail on shape or schedule errors before any training starts."""
    schedule = schedule_from_config(cfg, progressive)
    if cfg.model.kind != "gcn-baseline":
        options = cfg.transform_options()
        schedule.validate(n_joints, options.use_upt)
        build_cascade(n_joints, schedule.grids, cfg.seed, options, "f64")
    return schedule


def run_training(
    cfg: RunConfig,
    dataset: SkeletonDataset,
    out_dir: Optional[Path],
    progressive: bool,
    on_epoch: Optional[Callable[[int, int, List[MetricRow]], None]] = None,
    threads: int = 1,
) -> PlsResult:
    """Train one run (single grid or PLS cascade) and write its artifacts to ``out_dir``."""
    schedule = validate_run(cfg, dataset.graph.n_joints, progressive)
    fixed: Optional[Dict[str, np.ndarray]] = None
    if cfg.ablation.transforms_from is not None:
        fixed = load_checkpoint(cfg.ablation.transforms_from).tensors
        logger.info(f"Transforms copied from {cfg.ablation.transforms_from} and frozen")
    config_hash = cfg.config_hash()
    if out_dir is not None:
        cfg.write_resolved(Path(out_dir))
    return run_pls(
        schedule,
        dataset,
        cfg.train,
        model_preset=cfg.model.preset,
        kind=cfg.model.kind,
        options=cfg.transform_options(),
        spatial_kernel=cfg.model.spatial_kernel,
        temporal_kernel=cfg.model.temporal_kernel,
        frames=cfg.dataset.frames if cfg.dataset.path is None else None,
        normalize_adjacency=cfg.graph.normalize,
        learn_transforms=cfg.ablation.learn_transforms,
        fixed_transforms=fixed,
        out_dir=out_dir,
        metadata={"config_hash": config_hash, "seed": cfg.seed},
        on_epoch=on_epoch,
        threads=threads,
    )
