"""Comparative runs: named arms × seeds, mean ± std top-1 and the expected ordering checks."""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .runner import run_training, validate_run
from .skeleton import SkeletonDataset
from .transform import GridSize

logger = logging.getLogger("ske2grid.ablation")

ARM_NAMES = (
    "gcn-baseline",
    "gcn-grid",
    "git-only",
    "git+upt",
    "git+upt+pls",
    "fixed-transforms",
)

# (expected better, expected worse)
TREND_PAIRS = (("git+upt", "git-only"), ("git+upt+pls", "git+upt"))


def _with(cfg: RunConfig, **sections: Dict[str, object]) -> RunConfig:
    document = cfg.model_dump(mode="python")
    for section, values in sections.items():
        document[section].update(values)
    return RunConfig.model_validate(document)


def _progressive_stages(cfg: RunConfig) -> List[str]:
    grids = cfg.grid.grids
    if len(grids) > 1:
        return [str(g) for g in grids]
    first = grids[0]
    return [str(first), str(GridSize(first.height + 1, first.width + 1))]


def arm_config(base: RunConfig, arm: str) -> Tuple[RunConfig, bool]:
    """The run config of ``arm`` derived from ``base``, and whether it trains progressively."""
    first = [str(base.grid.grids[0])]
    single = {"stages": first, "stage_epochs": None}
    bijective = {"git_mode": "bijective", "use_upt": True, "learn_transforms": True}
    if arm == "gcn-baseline":
        return _with(base, model={"kind": "gcn-baseline"}, grid=single), False
    if arm == "gcn-grid":
        return _with(base, model={"kind": "gcn-grid"}, grid=single, ablation=bijective), False
    if arm == "git-only":
        return (
            _with(
                base,
                model={"kind": "ske2grid"},
                grid=single,
                ablation={"git_mode": "surjective", "use_upt": False, "learn_transforms": True},
            ),
            False,
        )
    if arm == "git+upt":
        return _with(base, model={"kind": "ske2grid"}, grid=single, ablation=bijective), False
    if arm == "git+upt+pls":
        stages = _progressive_stages(base)
        budgets = base.grid.stage_epochs if len(base.grid.grids) > 1 else None
        return (
            _with(
                base,
                model={"kind": "ske2grid"},
                grid={"stages": stages, "stage_epochs": budgets},
                ablation={**bijective, "pls": True},
            ),
            True,
        )
    if arm == "fixed-transforms":
        return (
            _with(
                base,
                model={"kind": "ske2grid"},
                grid=single,
                ablation={**bijective, "learn_transforms": False},
            ),
            False,
        )
    raise ConfigError(f"unknown arm '{arm}' ({', '.join(ARM_NAMES)})", "ablation.arms")


@dataclass
class PlannedRun:
    label: str
    arm: str
    seed: int
    cfg: RunConfig
    progressive: bool
    out_dir: Optional[Path]


def _labels(arms: Sequence[str]) -> List[str]:
    seen: Dict[str, int] = {}
    labels = []
    for arm in arms:
        seen[arm] = seen.get(arm, 0) + 1
        labels.append(arm if seen[arm] == 1 else f"{arm}#{seen[arm]}")
    return labels


def plan_ablation(
    base: RunConfig,
    arms: Sequence[str],
    seeds: Sequence[int],
    n_joints: int,
    out_dir: Optional[Path] = None,
) -> List[PlannedRun]:
    """Expand arms × seeds and validate every run config before anything trains."""
    if not arms:
        raise ConfigError("no arms to run", "ablation.arms")
    if not seeds:
        raise ConfigError("no seeds to run", "ablation.seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct", "ablation.seeds")
    plan = []
    for label, arm in zip(_labels(arms), arms):
        arm_cfg, progressive = arm_config(base, arm)
        for seed in seeds:
            run_cfg = RunConfig.model_validate({**arm_cfg.model_dump(mode="python"), "seed": seed})
            validate_run(run_cfg, n_joints, progressive)
            run_dir = None if out_dir is None else Path(out_dir) / label / f"seed{seed}"
            plan.append(PlannedRun(label, arm, seed, run_cfg, progressive, run_dir))
    return plan


@dataclass
class ArmSummary:
    label: str
    arm: str
    top1: Dict[int, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.top1.values())))

    @property
    def std(self) -> float:
        values = list(self.top1.values())
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class TrendCheck:
    better: str
    worse: str
    difference: float
    tolerance: float

    @property
    def status(self) -> str:
        if abs(self.difference) <= self.tolerance:
            return "inconclusive"
        return "holds" if self.difference > 0 else "violated"


@dataclass
class AblationReport:
    arms: List[ArmSummary]
    seeds: List[int]
    config_hash: str = ""

    def by_arm(self, arm: str) -> Optional[ArmSummary]:
        return next((a for a in self.arms if a.arm == arm), None)

    def trends(self) -> List[TrendCheck]:
        checks = []
        for better, worse in TREND_PAIRS:
            a, b = self.by_arm(better), self.by_arm(worse)
            if a is None or b is None:
                continue
            checks.append(TrendCheck(better, worse, a.mean - b.mean, max(a.std, b.std)))
        return checks


def run_ablation(
    base: RunConfig,
    dataset: SkeletonDataset,
    arms: Sequence[str],
    seeds: Sequence[int],
    out_dir: Optional[Path] = None,
    threads: int = 1,
    on_run: Optional[Callable[[PlannedRun, float], None]] = None,
) -> AblationReport:
    """Train every arm for every seed; runs go to ``out_dir/<arm>/seed<k>``."""
    plan = plan_ablation(base, arms, seeds, dataset.graph.n_joints, out_dir)
    logger.info(f"Ablation: {len(arms)} arms × {len(seeds)} seeds = {len(plan)} runs")

    def execute(run: PlannedRun) -> float:
        result = run_training(run.cfg, dataset, run.out_dir, run.progressive)
        top1 = result.final.val_top1
        logger.info(f"{run.label} seed {run.seed}: val top1 {top1:.3f}")
        if on_run is not None:
            on_run(run, top1)
        return top1

    if threads > 1 and len(plan) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            scores = list(executor.map(execute, plan))
    else:
        scores = [execute(run) for run in plan]

    summaries: Dict[str, ArmSummary] = {}
    for run, top1 in zip(plan, scores):
        summary = summaries.setdefault(run.label, ArmSummary(run.label, run.arm))
        summary.top1[run.seed] = top1
    return AblationReport(list(summaries.values()), list(seeds), base.config_hash())


def write_ablation_csv(path: Path, report: AblationReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["arm", "seeds", "mean_top1", "std_top1", *[f"seed{s}" for s in report.seeds]])
        for arm in report.arms:
            writer.writerow(
                [
                    arm.label,
                    len(arm.top1),
                    repr(arm.mean),
                    repr(arm.std),
                    *[repr(arm.top1.get(s, math.nan)) for s in report.seeds],
                ]
            )
    return path


def write_trends_csv(path: Path, report: AblationReport) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["better", "worse", "difference", "tolerance", "status"])
        for check in report.trends():
            writer.writerow(
                [check.better, check.worse, repr(check.difference), repr(check.tolerance), check.status]
            )
    return path
