#!/usr/bin/env python3
"""
ske2grid - skeleton-to-grid action recognition at desk scale

Generates synthetic skeleton datasets, trains Ske2Grid recognizers (single grid
or progressive cascades), evaluates checkpoints, verifies every gradient, runs
ablation arms and exports the learned grid layouts.

Usage:
    ske2grid gen-data --out runs/data.skds
    ske2grid train --grid 5x5
    ske2grid pls --stages 5x5,6x6,7x7,8x8
    ske2grid eval --checkpoint runs/stage1_5x5.sk2g
    ske2grid gradcheck
    ske2grid ablate --arms gcn-baseline,git-only,git+upt,git+upt+pls
    ske2grid viz-layout --checkpoint runs/stage4_8x8.sk2g --format svg

Exit codes: 0 ok, 1 runtime failure, 2 configuration error, 130 interrupted.
"""

import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Dict, Iterator, List, Optional

import questionary
import typer
from pydantic import ValidationError
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .ablation import ARM_NAMES, run_ablation, write_ablation_csv, write_trends_csv
from .checkpoint import load_checkpoint, restore_recognizer
from .config import RunConfig, Settings, console, format_validation_error, load_run_config, setup_logging
from .errors import ConfigError, DataError, Ske2GridError
from .gradcheck import SUITE_NAMES, SuiteResult, run_suites
from .layout import LAYOUT_FORMATS, layout_from_recognizer, write_layout
from .network import count_parameters, parameter_manifest
from .runner import dataset_from_config, graph_from_config, preview_recognizer, run_training
from .skeleton import load_skeleton_dataset, nearest_centroid_accuracy, save_dataset
from .training import MetricRow, PlsResult, evaluate, evaluate_ensemble, write_confusion_csv
from .transform import parse_grid_list

logger = logging.getLogger("ske2grid.cli")

app = typer.Typer(
    name="ske2grid",
    help="Skeleton-to-grid representation learning for action recognition",
    add_completion=False,
    no_args_is_help=True,
)


@dataclass
class CliState:
    """Global flags shared by every subcommand."""

    settings: Settings
    config_path: Optional[Path] = None
    seed: Optional[int] = None
    out_dir: Optional[Path] = None
    dtype: Optional[str] = None
    threads: Optional[int] = None
    force: bool = False

    @property
    def output_dir(self) -> Path:
        return Path(self.out_dir or self.settings.out_dir)

    @property
    def worker_threads(self) -> int:
        return self.threads or self.settings.threads

    def run_config(self, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        flags = {"seed": self.seed, "dtype": self.dtype, **(overrides or {})}
        return load_run_config(self.config_path, flags, defaults={"dtype": self.settings.dtype})


@contextmanager
def _cli_errors() -> Iterator[None]:
    """Map package failures to exit codes: config 2, runtime 1, interrupt 130."""
    try:
        yield
    except typer.Exit:
        raise
    except KeyboardInterrupt:
        console.print("\n[yellow]⚠️  Interrupted by user (Ctrl-C)[/yellow]")
        raise typer.Exit(130) from None
    except ValidationError as exc:
        error = format_validation_error(exc)
        console.print(f"[red]❌ Configuration error: {error}[/red]")
        raise typer.Exit(2) from None
    except ConfigError as exc:
        console.print(f"[red]❌ Configuration error: {exc}[/red]")
        raise typer.Exit(2) from None
    except Ske2GridError as exc:
        console.print(
            Panel.fit(f"[red]{exc}[/red]", title=f"❌ {type(exc).__name__}", border_style="red")
        )
        raise typer.Exit(1) from None


def _state(ctx: typer.Context) -> CliState:
    return ctx.obj


def _confirm_overwrite(out_dir: Path, force: bool, pattern: str = "*.sk2g") -> None:
    """Ask before writing into a directory that already holds results."""
    if force or not out_dir.exists() or not any(out_dir.rglob(pattern)):
        return
    console.print(f"[yellow]⚠️  {out_dir} already contains results[/yellow]")
    confirmed = questionary.confirm(f"Overwrite results in {out_dir}?", default=False).ask()
    if not confirmed:
        console.print("[yellow]Cancelled by user[/yellow]")
        raise typer.Exit(0)


def _split_list(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [part.strip() for part in text.split(",") if part.strip()]


@app.callback()
def main_callback(
    ctx: typer.Context,
    config: Annotated[
        Optional[Path], typer.Option("--config", "-c", help="Run configuration (TOML)")
    ] = None,
    seed: Annotated[Optional[int], typer.Option("--seed", help="Run seed")] = None,
    out_dir: Annotated[
        Optional[Path], typer.Option("--out-dir", help="Output directory (default: from env or 'runs')")
    ] = None,
    dtype: Annotated[Optional[str], typer.Option("--dtype", help="Training dtype: f32 or f64")] = None,
    threads: Annotated[
        Optional[int], typer.Option("--threads", help="Worker threads for evaluation and ablations")
    ] = None,
    force: Annotated[bool, typer.Option("--force", help="Skip confirmation prompts")] = False,
    no_color: Annotated[bool, typer.Option("--no-color", help="Disable colored output")] = False,
):
    """Skeleton-to-grid representation learning for action recognition."""
    if no_color:
        os.environ["NO_COLOR"] = "1"
    try:
        settings = Settings()
    except ValidationError as exc:
        console.print(f"[red]❌ Configuration error: {format_validation_error(exc)}[/red]")
        raise typer.Exit(2) from None
    setup_logging(settings.log_level)
    logger.debug(f"Settings: out_dir={settings.out_dir} threads={settings.threads} dtype={settings.dtype}")
    if dtype is not None and dtype not in ("f32", "f64"):
        console.print(f"[red]❌ Configuration error: --dtype: expected f32 or f64, got '{dtype}'[/red]")
        raise typer.Exit(2)
    if threads is not None and not 1 <= threads <= 64:
        console.print(f"[red]❌ Configuration error: --threads: expected 1..64, got {threads}[/red]")
        raise typer.Exit(2)
    ctx.obj = CliState(settings, config, seed, out_dir, dtype, threads, force)


# --- gen-data -----------------------------------------------------------------------


@app.command("gen-data")
def gen_data(
    ctx: typer.Context,
    out: Annotated[
        Optional[Path], typer.Option("--out", "-o", help="Dataset file (default: <out-dir>/dataset.skds)")
    ] = None,
    graph: Annotated[Optional[str], typer.Option(help="Skeleton graph name")] = None,
    classes: Annotated[Optional[int], typer.Option(help="Number of action classes")] = None,
    per_class: Annotated[Optional[int], typer.Option(help="Sequences per class")] = None,
    frames: Annotated[Optional[int], typer.Option(help="Frames per sequence")] = None,
    preset: Annotated[Optional[str], typer.Option(help="Generator preset: clean, moderate, hard")] = None,
    noise: Annotated[Optional[float], typer.Option(help="Noise σ (overrides the preset)")] = None,
):
    """Generate a synthetic skeleton-action dataset."""
    state = _state(ctx)
    with _cli_errors():
        cfg = state.run_config(
            {
                "dataset.graph": graph,
                "dataset.n_classes": classes,
                "dataset.n_per_class": per_class,
                "dataset.frames": frames,
                "dataset.preset": preset,
                "dataset.noise": noise,
            }
        )
        if cfg.dataset.path is not None:
            raise ConfigError("gen-data writes a new dataset; drop dataset.path", "dataset.path")
        path = out or state.output_dir / "dataset.skds"
        if path.exists() and not state.force:
            confirmed = questionary.confirm(f"{path} exists. Overwrite?", default=False).ask()
            if not confirmed:
                console.print("[yellow]Cancelled by user[/yellow]")
                raise typer.Exit(0)
        dataset = dataset_from_config(cfg)
        save_dataset(path, dataset.sequences, dataset.manifest, dataset.graph.n_joints)
        centroid = nearest_centroid_accuracy(dataset.sequences, dataset.manifest)

        table = Table(title="Dataset")
        table.add_column("Setting", style="cyan")
        table.add_column("Value", justify="right")
        table.add_row("Graph", f"{dataset.graph.name} ({dataset.graph.n_joints} joints)")
        table.add_row("Classes", str(dataset.n_classes))
        table.add_row("Sequences", str(len(dataset.sequences)))
        table.add_row("Train / val", f"{len(dataset.manifest.train_indices)} / {len(dataset.manifest.val_indices)}")
        table.add_row("Frames", str(cfg.dataset.frames))
        table.add_row("Noise σ", f"{dataset.manifest.generator['noise']:.3f}")
        table.add_row("Centroid oracle (val top-1)", f"{centroid:.3f}")
        console.print(table)
        console.print(f"[green]✓ Wrote {path}[/green]")


# --- train / pls ---------------------------------------------------------------------


def _train_overrides(
    git_mode: Optional[str],
    no_upt: bool,
    no_adjacency: bool,
    kind: Optional[str],
    epochs: Optional[int],
    dataset: Optional[Path],
) -> Dict[str, Any]:
    return {
        "ablation.git_mode": git_mode,
        "ablation.use_upt": False if no_upt else None,
        "ablation.use_adjacency": False if no_adjacency else None,
        "model.kind": kind,
        "train.epochs": epochs,
        "dataset.path": str(dataset) if dataset else None,
    }


def _run_with_progress(cfg: RunConfig, state: CliState, progressive: bool) -> PlsResult:
    out_dir = state.output_dir
    _confirm_overwrite(out_dir, state.force)
    dataset = dataset_from_config(cfg)
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
    ) as progress:
        task = progress.add_task("Training...", total=None)

        def on_epoch(stage: int, epoch: int, rows: List[MetricRow]) -> None:
            val = rows[-1]
            progress.update(
                task, description=f"stage {stage} epoch {epoch}: val top1 {val.top1:.3f}"
            )

        result = run_training(cfg, dataset, out_dir, progressive, on_epoch, state.worker_threads)
    return result


def _print_run(result: PlsResult, config_hash: str) -> None:
    table = Table(title="Stages")
    table.add_column("Stage", justify="right")
    table.add_column("Grid", style="cyan")
    table.add_column("Val top-1", justify="right")
    table.add_column("Checkpoint")
    for report in result.stages:
        table.add_row(
            str(report.stage), str(report.grid), f"{report.val_top1:.3f}", str(report.checkpoint_path)
        )
    console.print(table)
    console.print(
        Panel.fit(
            f"[green]✓ Final val top-1: {result.final.val_top1:.3f}[/green]\n"
            f"[cyan]Config hash:[/cyan] {config_hash}",
            title="Done",
            border_style="green",
        )
    )


def _print_parameters(cfg: RunConfig) -> None:
    graph = graph_from_config(cfg)
    n_classes = cfg.dataset.n_classes
    if cfg.dataset.path is not None:
        dataset = load_skeleton_dataset(cfg.dataset.path, cfg.graph.self_loops)
        graph, n_classes = dataset.graph, dataset.n_classes
    recognizer = preview_recognizer(cfg, graph, n_classes)
    table = Table(title=f"Parameters ({cfg.model.kind}, {recognizer.model.cfg.grid} grid)")
    table.add_column("Tensor", style="cyan")
    table.add_column("Shape")
    table.add_column("Count", justify="right")
    for name, shape, size in parameter_manifest(recognizer.model):
        table.add_row(name, "×".join(map(str, shape)), str(size))
    transform_total = 0
    if recognizer.cascade is not None:
        for name, tensor in recognizer.cascade.named_parameters().items():
            table.add_row(name, "×".join(map(str, tensor.shape)), str(tensor.data.size))
            transform_total += int(tensor.data.size)
    console.print(table)
    console.print(
        Panel.fit(
            f"[cyan]Network:[/cyan] {count_parameters(recognizer.model)}\n"
            f"[cyan]Transforms:[/cyan] {transform_total}\n"
            f"[cyan]Config hash:[/cyan] {cfg.config_hash()}",
            title="Dry run",
            border_style="cyan",
        )
    )


@app.command()
def train(
    ctx: typer.Context,
    grid: Annotated[Optional[str], typer.Option(help="Grid size HxW (default: first configured grid)")] = None,
    git_mode: Annotated[
        Optional[str], typer.Option("--git-mode", help="bijective, surjective or unconstrained")
    ] = None,
    no_upt: Annotated[bool, typer.Option("--no-upt", help="Skip the up-sampling transform")] = False,
    no_adjacency: Annotated[
        bool, typer.Option("--no-adjacency", help="Up-sample X without the skeleton adjacency")
    ] = False,
    kind: Annotated[Optional[str], typer.Option(help="ske2grid, gcn-baseline or gcn-grid")] = None,
    epochs: Annotated[Optional[int], typer.Option(help="Training epochs")] = None,
    dataset: Annotated[Optional[Path], typer.Option(help="Dataset file (default: generate)")] = None,
    dry_run: Annotated[bool, typer.Option("--dry-run", help="Print the parameter report only")] = False,
):
    """Train a recognizer on a single grid."""
    state = _state(ctx)
    with _cli_errors():
        overrides = _train_overrides(git_mode, no_upt, no_adjacency, kind, epochs, dataset)
        if grid is not None:
            overrides["grid.stages"] = [str(g) for g in parse_grid_list(grid)][:1]
            overrides["grid.stage_epochs"] = None
        cfg = state.run_config(overrides)
        if dry_run:
            _print_parameters(cfg)
            return
        result = _run_with_progress(cfg, state, progressive=False)
        _print_run(result, cfg.config_hash())


@app.command()
def pls(
    ctx: typer.Context,
    stages: Annotated[
        Optional[str], typer.Option(help="Comma-separated grids, e.g. 5x5,6x6,7x7,8x8")
    ] = None,
    stage_epochs: Annotated[
        Optional[str], typer.Option("--stage-epochs", help="Comma-separated epochs per stage")
    ] = None,
    git_mode: Annotated[Optional[str], typer.Option("--git-mode")] = None,
    no_upt: Annotated[bool, typer.Option("--no-upt")] = False,
    no_adjacency: Annotated[bool, typer.Option("--no-adjacency")] = False,
    epochs: Annotated[Optional[int], typer.Option(help="Epochs per stage")] = None,
    dataset: Annotated[Optional[Path], typer.Option(help="Dataset file (default: generate)")] = None,
):
    """Progressive training over a growing sequence of grids."""
    state = _state(ctx)
    with _cli_errors():
        overrides = _train_overrides(git_mode, no_upt, no_adjacency, None, epochs, dataset)
        overrides["ablation.pls"] = True
        if stages is not None:
            overrides["grid.stages"] = [str(g) for g in parse_grid_list(stages)]
            overrides["grid.stage_epochs"] = None
        if stage_epochs is not None:
            try:
                overrides["grid.stage_epochs"] = [int(e) for e in _split_list(stage_epochs)]
            except ValueError:
                raise ConfigError(f"expected integers, got '{stage_epochs}'", "--stage-epochs") from None
        cfg = state.run_config(overrides)
        result = _run_with_progress(cfg, state, progressive=True)
        _print_run(result, cfg.config_hash())


# --- eval ------------------------------------------------------------------------------


@app.command("eval")
def eval_command(
    ctx: typer.Context,
    checkpoint: Annotated[
        List[Path], typer.Option("--checkpoint", help="Checkpoint file (repeat to ensemble)")
    ],
    dataset: Annotated[Optional[Path], typer.Option(help="Dataset file (default: regenerate)")] = None,
    split: Annotated[str, typer.Option(help="train, val or all")] = "val",
    confusion: Annotated[
        Optional[Path], typer.Option(help="Confusion CSV (default: <out-dir>/confusion.csv)")
    ] = None,
):
    """Evaluate one checkpoint, or the softmax-averaged ensemble of several."""
    state = _state(ctx)
    with _cli_errors():
        cfg = state.run_config({"dataset.path": str(dataset) if dataset else None})
        checkpoints = [load_checkpoint(path) for path in checkpoint]
        recognizers = [restore_recognizer(ckpt) for ckpt in checkpoints]
        data = dataset_from_config(cfg)
        for path, recognizer in zip(checkpoint, recognizers):
            if recognizer.graph.n_joints != data.graph.n_joints:
                raise DataError(
                    f"{path} expects {recognizer.graph.n_joints} joints, "
                    f"the dataset has {data.graph.n_joints}"
                )
        frames = checkpoints[0].metadata.get("frames")
        if len(recognizers) == 1:
            result = evaluate(recognizers[0], data, split, frames, threads=state.worker_threads)
        else:
            result = evaluate_ensemble(recognizers, data, split, frames, threads=state.worker_threads)
        path = confusion or state.output_dir / "confusion.csv"
        write_confusion_csv(path, result.confusion, data.manifest.class_names)

        table = Table(title="Evaluation")
        table.add_column("Checkpoints", justify="right")
        table.add_column("Split")
        table.add_column("Top-1", justify="right", style="green")
        table.add_column("Loss", justify="right")
        table.add_row(str(len(recognizers)), split, f"{result.top1:.4f}", f"{result.loss:.4f}")
        console.print(table)
        console.print(f"[green]✓ Confusion matrix written to {path}[/green]")


# --- gradcheck --------------------------------------------------------------------------


@app.command()
def gradcheck(
    ctx: typer.Context,
    instances: Annotated[int, typer.Option(help="Random instances per suite")] = 50,
    suite: Annotated[
        Optional[List[str]], typer.Option("--suite", help=f"Run only these suites ({', '.join(SUITE_NAMES)})")
    ] = None,
):
    """Central-difference gradient checks of every operation and the full pipeline (f64)."""
    state = _state(ctx)
    with _cli_errors():
        if instances < 1:
            raise ConfigError(f"need at least one instance, got {instances}", "--instances")
        results: List[SuiteResult] = []
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
        ) as progress:
            task = progress.add_task("Gradient suites...", total=None)

            def on_suite(result: SuiteResult) -> None:
                progress.update(task, description=f"{result.name}: max error {result.max_error:.2e}")

            results = run_suites(instances, state.seed or 0, suite, on_suite)

        table = Table(title="Gradient checks (f64, central differences)")
        table.add_column("Suite", style="cyan")
        table.add_column("Instances", justify="right")
        table.add_column("Max rel. error", justify="right")
        table.add_column("Tolerance", justify="right")
        table.add_column("Seconds", justify="right")
        table.add_column("Status")
        for result in results:
            status = "[green]✓ pass[/green]" if result.passed else "[red]❌ fail[/red]"
            table.add_row(
                result.name,
                str(result.instances),
                f"{result.max_error:.2e}",
                f"{result.tolerance:.0e}",
                f"{result.seconds:.1f}",
                status,
            )
        console.print(table)
        failed = [r.name for r in results if not r.passed]
        if failed:
            console.print(f"[red]❌ {len(failed)} suite(s) failed: {', '.join(failed)}[/red]")
            raise typer.Exit(1)
        console.print(f"[green]✓ All {len(results)} suites passed[/green]")


# --- ablate ------------------------------------------------------------------------------


@app.command()
def ablate(
    ctx: typer.Context,
    arms: Annotated[
        Optional[str], typer.Option(help=f"Comma-separated arms ({', '.join(ARM_NAMES)})")
    ] = None,
    seeds: Annotated[Optional[str], typer.Option(help="Comma-separated seeds")] = None,
    dataset: Annotated[Optional[Path], typer.Option(help="Dataset file (default: generate)")] = None,
):
    """Run ablation arms over several seeds and report mean ± std top-1."""
    state = _state(ctx)
    with _cli_errors():
        overrides: Dict[str, Any] = {"dataset.path": str(dataset) if dataset else None}
        if arms is not None:
            overrides["ablation.arms"] = _split_list(arms)
        if seeds is not None:
            try:
                overrides["ablation.seeds"] = [int(s) for s in _split_list(seeds)]
            except ValueError:
                raise ConfigError(f"expected integers, got '{seeds}'", "--seeds") from None
        cfg = state.run_config(overrides)
        out_dir = state.output_dir
        _confirm_overwrite(out_dir, state.force)
        data = dataset_from_config(cfg)
        cfg.write_resolved(out_dir)

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
        ) as progress:
            total = len(cfg.ablation.arms) * len(cfg.ablation.seeds)
            task = progress.add_task(f"Running {total} ablation runs...", total=total)

            def on_run(run, top1: float) -> None:
                progress.update(task, description=f"{run.label} seed {run.seed}: {top1:.3f}")
                progress.advance(task)

            report = run_ablation(
                cfg,
                data,
                cfg.ablation.arms,
                cfg.ablation.seeds,
                out_dir,
                state.worker_threads,
                on_run,
            )

        csv_path = write_ablation_csv(out_dir / "ablation.csv", report)
        trends_path = write_trends_csv(out_dir / "ablation_trends.csv", report)

        table = Table(title=f"Ablation ({len(report.seeds)} seeds)")
        table.add_column("Arm", style="cyan")
        table.add_column("Mean top-1", justify="right")
        table.add_column("Std", justify="right")
        for arm in report.arms:
            table.add_row(arm.label, f"{arm.mean:.4f}", f"{arm.std:.4f}")
        console.print(table)

        styles = {"holds": "green", "inconclusive": "yellow", "violated": "red"}
        for check in report.trends():
            style = styles[check.status]
            console.print(
                f"[{style}]{check.better} ≥ {check.worse}: {check.status} "
                f"(Δ {check.difference:+.4f}, 1 std {check.tolerance:.4f})[/{style}]"
            )
        console.print(f"[green]✓ Report written to {csv_path} and {trends_path}[/green]")


# --- viz-layout ---------------------------------------------------------------------------


@app.command("viz-layout")
def viz_layout(
    ctx: typer.Context,
    checkpoint: Annotated[Path, typer.Option("--checkpoint", help="Checkpoint with transform stages")],
    out: Annotated[
        Optional[Path], typer.Option("--out", "-o", help="Output file (default: <out-dir>/layout.<format>)")
    ] = None,
    fmt: Annotated[str, typer.Option("--format", help="dot, svg or csv")] = "svg",
    stage: Annotated[
        Optional[int], typer.Option(help="Cascade stage to lay out (default: the last)")
    ] = None,
):
    """Export the learned grid layout: dominant joint per cell and induced joint links."""
    state = _state(ctx)
    with _cli_errors():
        if fmt not in LAYOUT_FORMATS:
            raise ConfigError(f"unknown layout format '{fmt}' ({', '.join(LAYOUT_FORMATS)})", "--format")
        ckpt = load_checkpoint(checkpoint)
        recognizer = restore_recognizer(ckpt)
        layout = layout_from_recognizer(recognizer, stage, str(ckpt.metadata.get("config_hash", "")))
        path = out or state.output_dir / f"layout.{fmt}"
        write_layout(layout, path, fmt, state.settings.templates_path)
        console.print(
            f"[green]✓ {layout.grid} layout of stage {layout.stage} written to {path}[/green]"
        )


def main():
    """Entry point for script execution."""
    app()


if __name__ == "__main__":
    app()
