"""Optimizer, learning-rate schedules, the single-stage loop and progressive (PLS) training."""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .checkpoint import Checkpoint, checkpoint_from, copy_transforms, save_checkpoint
from .errors import ConfigError, DivergenceError, NonFiniteError
from .functional import log_softmax, softmax, softmax_cross_entropy
from .network import ModelConfig, Recognizer, build_model
from .skeleton import SkeletonDataset, SkeletonSequence, harmonize_length
from .tensor import Tensor, no_grad
from .transform import (
    GridSize,
    PlsCascade,
    TransformOptions,
    append_stage,
    build_cascade,
    freeze_prefix,
)

logger = logging.getLogger("ske2grid.training")

METRICS_HEADER = ("epoch", "split", "loss", "top1")


class TrainConfig(BaseModel):
    """Optimizer and schedule settings; class defaults are the large-run settings."""

    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=0.1, gt=0.0, description="Initial learning rate")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    nesterov: bool = True
    epochs: int = Field(default=80, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr_schedule: Literal["step", "cosine"] = "step"
    milestones: List[int] = Field(default_factory=lambda: [10, 50])
    gamma: float = Field(default=0.1, gt=0.0, le=1.0)
    transform_lr: Optional[float] = Field(
        default=None, gt=0.0, description="Separate learning rate for Λ and Ψ (default: shared)"
    )
    seed: int = 0
    dtype: Literal["f32", "f64"] = "f32"

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale settings: 30 epochs, batch 16, cosine schedule."""
        values = {"epochs": 30, "batch_size": 16, "lr_schedule": "cosine"}
        values.update(overrides)
        return cls(**values)


# --- optimizer --------------------------------------------------------------------


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: Dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    nesterov: bool = True,
    lr_scale: Optional[Mapping[str, float]] = None,
) -> Mapping[str, np.ndarray]:
    """One in-place SGD update.

    ``g = grad + wd·θ``, ``v = μ·v + g``; Nesterov: ``θ -= lr·(g + μ·v)``,
    otherwise ``θ -= lr·v``. Parameters without a gradient are skipped. All
    gradients are checked before any parameter moves.
    """
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for '{name}'; step aborted")
    for name, theta in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        g = grad + weight_decay * theta if weight_decay else grad
        if momentum:
            v = state.get(name)
            v = g.copy() if v is None else momentum * v + g
            state[name] = v
            update = g + momentum * v if nesterov else v
        else:
            update = g
        step = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        theta -= (step * update).astype(theta.dtype, copy=False)
    return params


class SGD:
    """Stateful wrapper over :func:`sgd_step` for named tensors."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        nesterov: bool = True,
        lr_scale: Optional[Mapping[str, float]] = None,
    ) -> None:
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.lr_scale = dict(lr_scale or {})
        self.state: Dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        sgd_step(
            {name: p.data for name, p in self.params.items()},
            {name: p.grad for name, p in self.params.items()},
            self.state,
            lr,
            self.momentum,
            self.weight_decay,
            self.nesterov,
            self.lr_scale,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def learning_rate(cfg: TrainConfig, epoch: int, iteration: int = 0, per_epoch: int = 1) -> float:
    """Step schedule decays per epoch at each milestone; cosine anneals per iteration to zero."""
    if cfg.lr_schedule == "step":
        return cfg.lr * cfg.gamma ** sum(1 for m in cfg.milestones if epoch >= m)
    total = cfg.epochs * per_epoch
    progress = (epoch * per_epoch + iteration) / total
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(recognizer: Recognizer, cfg: TrainConfig) -> SGD:
    params = recognizer.named_parameters(trainable_only=True)
    lr_scale = {}
    if cfg.transform_lr is not None:
        lr_scale = {name: cfg.transform_lr / cfg.lr for name in params if name.startswith("stage")}
    return SGD(params, cfg.momentum, cfg.weight_decay, cfg.nesterov, lr_scale)


# --- batching ----------------------------------------------------------------------


def iterate_batches(
    count: int, batch_size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[np.ndarray]:
    """Index batches over ``range(count)``; shuffled when ``rng`` is given."""
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def make_batch(
    sequences: Sequence[SkeletonSequence], indices: Sequence[int], frames: int, dtype
) -> Tuple[Tensor, np.ndarray]:
    """``[B, T, N, 3]`` features (length-harmonized) and their labels."""
    arrays = [harmonize_length(sequences[i].frames, frames) for i in indices]
    labels = np.array([sequences[i].label for i in indices], dtype=np.int64)
    return Tensor(np.stack(arrays), dtype=dtype), labels


def default_frames(dataset: SkeletonDataset) -> int:
    recorded = dataset.manifest.generator.get("frames")
    if recorded:
        return int(recorded)
    return max(s.n_frames for s in dataset.sequences)


# --- metrics ---------------------------------------------------------------------


@dataclass
class MetricRow:
    epoch: int
    split: str
    loss: float
    top1: float


def write_metrics_csv(path: Path, rows: Sequence[MetricRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row.epoch, row.split, repr(float(row.loss)), repr(float(row.top1))])
    return path


@dataclass
class EvalResult:
    top1: float
    loss: float
    confusion: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        return self.scores.argmax(axis=1)


def _confusion(labels: np.ndarray, predictions: np.ndarray, n_classes: int) -> np.ndarray:
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)
    return matrix


def write_confusion_csv(path: Path, confusion: np.ndarray, class_names: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true\\predicted", *class_names])
        for name, row in zip(class_names, confusion):
            writer.writerow([name, *map(int, row)])
    return path


def _logits(
    recognizer: Recognizer,
    sequences: Sequence[SkeletonSequence],
    frames: int,
    batch_size: int,
    threads: int,
) -> Tuple[np.ndarray, np.ndarray]:
    batches = list(iterate_batches(len(sequences), batch_size))

    def run(indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        with no_grad():
            x, labels = make_batch(sequences, indices, frames, recognizer.dtype)
            return recognizer.forward(x).data, labels

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(run, batches))
    else:
        results = [run(indices) for indices in batches]
    return np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results])


def _split_sequences(dataset: SkeletonDataset, split: str) -> List[SkeletonSequence]:
    sequences = dataset.split(split)
    if not sequences:
        raise ConfigError(f"the {split} split is empty", "split")
    return sequences


def evaluate(
    recognizer: Recognizer,
    dataset: SkeletonDataset,
    split: str = "val",
    frames: Optional[int] = None,
    batch_size: int = 64,
    threads: int = 1,
) -> EvalResult:
    """Top-1 accuracy and confusion matrix in eval mode; batches may be sharded over threads."""
    sequences = _split_sequences(dataset, split)
    frames = frames or default_frames(dataset)
    was_training = recognizer.training
    recognizer.eval()
    try:
        logits, labels = _logits(recognizer, sequences, frames, batch_size, threads)
    finally:
        if was_training:
            recognizer.train()
    return _summarize(logits, labels, dataset.n_classes, probabilities=False)


def evaluate_ensemble(
    recognizers: Sequence[Recognizer],
    dataset: SkeletonDataset,
    split: str = "val",
    frames: Optional[int] = None,
    batch_size: int = 64,
    threads: int = 1,
) -> EvalResult:
    """Average the softmax scores of several recognizers (e.g. every PLS stage model)."""
    if not recognizers:
        raise ConfigError("no checkpoints to evaluate", "checkpoint")
    sequences = _split_sequences(dataset, split)
    frames = frames or default_frames(dataset)
    total = None
    labels = None
    for recognizer in recognizers:
        recognizer.eval()
        logits, labels = _logits(recognizer, sequences, frames, batch_size, threads)
        probs = softmax(logits.astype(np.float64))
        total = probs if total is None else total + probs
    return _summarize(total / len(recognizers), labels, dataset.n_classes, probabilities=True)


def _summarize(scores: np.ndarray, labels: np.ndarray, n_classes: int, probabilities: bool) -> EvalResult:
    predictions = scores.argmax(axis=1)
    if probabilities:
        picked = scores[np.arange(len(labels)), labels]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    else:
        logp = log_softmax(scores.astype(np.float64))
        loss = float(-np.mean(logp[np.arange(len(labels)), labels]))
    return EvalResult(
        top1=float(np.mean(predictions == labels)),
        loss=loss,
        confusion=_confusion(labels, predictions, n_classes),
        scores=scores,
        labels=labels,
    )


# --- single stage ------------------------------------------------------------------


@dataclass
class StageResult:
    history: List[MetricRow]
    checkpoint: Checkpoint
    val_top1: float
    steps: int


def train_stage(
    recognizer: Recognizer,
    dataset: SkeletonDataset,
    cfg: TrainConfig,
    frames: Optional[int] = None,
    stage_index: int = 1,
    metadata: Optional[Dict[str, object]] = None,
    on_epoch: Optional[Callable[[int, List[MetricRow]], None]] = None,
    max_steps: Optional[int] = None,
    threads: int = 1,
) -> StageResult:
    """Minibatch SGD over cross-entropy for ``cfg.epochs`` epochs.

    Shuffling draws from ``default_rng([seed, stage_index])`` so a fixed seed
    reproduces the run exactly. ``max_steps`` stops early (used by tests).
    """
    if recognizer.cascade is not None and recognizer.cascade.grid != recognizer.model.cfg.grid:
        raise ConfigError("cascade grid does not match the model grid", "grid")
    train_set = _split_sequences(dataset, "train")
    frames = frames or default_frames(dataset)
    rng = np.random.default_rng([cfg.seed, stage_index])
    optimizer = make_optimizer(recognizer, cfg)
    per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    history: List[MetricRow] = []
    steps = 0
    recognizer.train()

    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        correct = 0
        seen = 0
        for iteration, indices in enumerate(iterate_batches(len(train_set), cfg.batch_size, rng)):
            x, labels = make_batch(train_set, indices, frames, recognizer.dtype)
            recognizer.zero_grad()
            try:
                logits = recognizer.forward(x)
                loss = softmax_cross_entropy(logits, labels)
                loss.backward()
                optimizer.step(learning_rate(cfg, epoch, iteration, per_epoch))
            except NonFiniteError as exc:
                raise DivergenceError(str(exc), epoch + 1, iteration + 1) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError("training loss is not finite", epoch + 1, iteration + 1)
            loss_sum += value * len(indices)
            correct += int(np.sum(logits.data.argmax(axis=1) == labels))
            seen += len(indices)
            steps += 1
            logger.debug(f"epoch {epoch + 1} step {iteration + 1}: loss {value:.4f}")
            if max_steps is not None and steps >= max_steps:
                break
        history.append(MetricRow(epoch + 1, "train", loss_sum / seen, correct / seen))
        val = evaluate(recognizer, dataset, "val", frames, threads=threads)
        history.append(MetricRow(epoch + 1, "val", val.loss, val.top1))
        logger.info(
            f"epoch {epoch + 1}/{cfg.epochs}: train loss {loss_sum / seen:.4f} "
            f"top1 {correct / seen:.3f} | val top1 {val.top1:.3f}"
        )
        if on_epoch is not None:
            on_epoch(epoch + 1, history)
        if max_steps is not None and steps >= max_steps:
            break

    recognizer.eval()
    meta = dict(metadata or {})
    meta.update(
        {
            "stage_index": stage_index,
            "metrics": [asdict(row) for row in history],
            "train": cfg.model_dump(mode="json"),
        }
    )
    checkpoint = checkpoint_from(recognizer, meta)
    return StageResult(history, checkpoint, history[-1].top1, steps)


# --- progressive learning ------------------------------------------------------------


@dataclass
class PlsSchedule:
    grids: List[GridSize]
    stage_epochs: Optional[List[int]] = None

    def validate(self, n_joints: int, use_upt: bool = True) -> None:
        if not self.grids:
            raise ConfigError("the schedule has no grids", "grid.stages")
        if use_upt and self.grids[0].cells < n_joints:
            raise ConfigError(
                f"first grid {self.grids[0]} has fewer cells than the {n_joints} joints",
                "grid.stages",
            )
        for previous, current in zip(self.grids, self.grids[1:]):
            if not (current.height > previous.height and current.width > previous.width):
                raise ConfigError(
                    f"grid {current} does not grow from {previous} in both extents",
                    "grid.stages",
                )
        if self.stage_epochs is not None:
            if len(self.stage_epochs) != len(self.grids):
                raise ConfigError(
                    f"{len(self.stage_epochs)} stage budgets for {len(self.grids)} grids",
                    "grid.stage_epochs",
                )
            if any(e < 1 for e in self.stage_epochs):
                raise ConfigError("every stage needs at least one epoch", "grid.stage_epochs")

    def epochs_for(self, stage: int, default: int) -> int:
        return self.stage_epochs[stage] if self.stage_epochs else default


@dataclass
class StageReport:
    stage: int
    grid: GridSize
    history: List[MetricRow]
    val_top1: float
    checkpoint: Checkpoint
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None


@dataclass
class PlsResult:
    recognizer: Recognizer
    stages: List[StageReport] = field(default_factory=list)

    @property
    def final(self) -> StageReport:
        return self.stages[-1]


def stage_file_stem(stage: int, grid: GridSize) -> str:
    return f"stage{stage}_{grid}"


def run_pls(
    schedule: PlsSchedule,
    dataset: SkeletonDataset,
    cfg: TrainConfig,
    model_preset: str = "small",
    kind: str = "ske2grid",
    options: Optional[TransformOptions] = None,
    spatial_kernel: int = 3,
    temporal_kernel: int = 9,
    frames: Optional[int] = None,
    normalize_adjacency: bool = False,
    learn_transforms: bool = True,
    fixed_transforms: Optional[Mapping[str, np.ndarray]] = None,
    out_dir: Optional[Path] = None,
    metadata: Optional[Dict[str, object]] = None,
    on_epoch: Optional[Callable[[int, int, List[MetricRow]], None]] = None,
    threads: int = 1,
) -> PlsResult:
    """Train stage by stage, freezing earlier transforms and warm-starting the network.

    A one-grid schedule is plain :func:`train_stage`. The whole shape chain is
    validated before any training starts.
    """
    options = options or TransformOptions()
    graph = dataset.graph
    if kind == "gcn-baseline":
        if len(schedule.grids) > 1:
            raise ConfigError("the graph-convolution baseline has no grid to grow", "grid.stages")
        grids = [GridSize(1, graph.n_joints)]
    else:
        schedule.validate(graph.n_joints, options.use_upt)
        build_cascade(graph.n_joints, schedule.grids, cfg.seed, options, "f64")
        grids = schedule.grids

    result: Optional[PlsResult] = None
    cascade: Optional[PlsCascade] = None
    previous_state: Optional[Dict[str, np.ndarray]] = None
    for stage, grid in enumerate(grids, start=1):
        model_cfg = ModelConfig.preset(
            model_preset, grid, dataset.n_classes, spatial_kernel, temporal_kernel
        )
        model = build_model(model_cfg, kind, graph, cfg.seed, cfg.dtype)
        if previous_state is not None:
            report = model.load_state_dict(previous_state, strict=True)
            logger.info(f"Warm start: loaded {len(report.loaded)} network tensors")
        if kind != "gcn-baseline":
            if cascade is None:
                cascade = build_cascade(graph.n_joints, [grid], cfg.seed, options, cfg.dtype)
            else:
                append_stage(cascade, grid, cfg.seed, cfg.dtype)
            if fixed_transforms:
                copied = copy_transforms(cascade, fixed_transforms, stage)
                if copied:
                    freeze_prefix(cascade, stage)
            if not learn_transforms:
                freeze_prefix(cascade, stage)
        recognizer = Recognizer(graph, model, cascade, normalize_adjacency)
        stage_cfg = cfg.model_copy(update={"epochs": schedule.epochs_for(stage - 1, cfg.epochs)})
        logger.info(f"Stage {stage}/{len(grids)}: {kind} on a {grid} grid, {stage_cfg.epochs} epochs")
        meta = dict(metadata or {})
        meta["class_names"] = list(dataset.manifest.class_names)
        meta["frames"] = frames or default_frames(dataset)
        stage_result = train_stage(
            recognizer,
            dataset,
            stage_cfg,
            frames,
            stage,
            meta,
            on_epoch=(lambda epoch, rows, s=stage: on_epoch(s, epoch, rows)) if on_epoch else None,
            threads=threads,
        )
        report = StageReport(
            stage, grid, stage_result.history, stage_result.val_top1, stage_result.checkpoint
        )
        if out_dir is not None:
            stem = stage_file_stem(stage, grid)
            report.checkpoint_path = save_checkpoint(
                Path(out_dir) / f"{stem}.sk2g", stage_result.checkpoint
            )
            report.metrics_path = write_metrics_csv(
                Path(out_dir) / f"{stem}_metrics.csv", stage_result.history
            )
        if result is None:
            result = PlsResult(recognizer)
        result.recognizer = recognizer
        result.stages.append(report)
        previous_state = model.state_dict()
    return result
