"""Desk-scale acceptance runs.

These train real recognizers for minutes of CPU and are deselected by default;
run them with ``pytest -m slow``.
"""

import numpy as np
import pytest

from ske2grid.ablation import run_ablation, write_ablation_csv, write_trends_csv
from ske2grid.config import load_run_config
from ske2grid.gradcheck import run_suites
from ske2grid.runner import dataset_from_config, run_training

pytestmark = pytest.mark.slow


class TestGradientSuites:
    """Every operation and the full pipeline at 50 instances."""

    def test_all_suites_pass(self):
        """Per-op suites within 1e-5, end to end within 1e-4."""
        results = run_suites(50, seed=0)
        failed = [(r.name, r.max_error) for r in results if not r.passed]
        assert not failed


class TestDeskScale:
    """The default desk configuration end to end."""

    def test_five_by_five_reaches_ninety_percent(self, tmp_path):
        """chain17, 5 classes, moderate noise: ≥ 90% val top-1 within 30 epochs."""
        cfg = load_run_config()
        dataset = dataset_from_config(cfg)
        result = run_training(cfg, dataset, tmp_path, progressive=False)
        assert result.final.val_top1 >= 0.90
        assert all(np.isfinite(row.loss) for row in result.final.history)

    def test_identical_runs_are_bitwise_identical(self, tmp_path):
        """Same config and seed give the same checkpoint and metric bytes."""
        cfg = load_run_config(
            overrides={"dataset.n_per_class": 20, "train.epochs": 2, "grid.stages": ["5x5", "6x6"]}
        )
        dataset = dataset_from_config(cfg)
        first = run_training(cfg, dataset, tmp_path / "a", progressive=True)
        second = run_training(cfg, dataset, tmp_path / "b", progressive=True)
        for a, b in zip(first.stages, second.stages):
            assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
            assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()


class TestAblationTrend:
    """The arm ordering over five seeds on the hard preset."""

    def test_report_records_every_trend(self, tmp_path):
        """Both expected orderings get a status; a tie is inconclusive, not a failure."""
        cfg = load_run_config(overrides={"dataset.preset": "hard"})
        dataset = dataset_from_config(cfg)
        report = run_ablation(
            cfg, dataset, ["git-only", "git+upt", "git+upt+pls"], [0, 1, 2, 3, 4], tmp_path
        )
        write_ablation_csv(tmp_path / "ablation.csv", report)
        trends_path = write_trends_csv(tmp_path / "ablation_trends.csv", report)
        checks = report.trends()
        assert [(c.better, c.worse) for c in checks] == [
            ("git+upt", "git-only"),
            ("git+upt+pls", "git+upt"),
        ]
        assert all(c.status in ("holds", "inconclusive", "violated") for c in checks)
        assert len(trends_path.read_text().splitlines()) == 3
