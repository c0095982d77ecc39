"""Tests for ablation arms, planning and the summary files."""

import csv

import pytest

from ske2grid.ablation import (
    ARM_NAMES,
    AblationReport,
    ArmSummary,
    TrendCheck,
    arm_config,
    plan_ablation,
    run_ablation,
    write_ablation_csv,
    write_trends_csv,
)
from ske2grid.checkpoint import load_checkpoint, restore_recognizer
from ske2grid.config import load_run_config
from ske2grid.errors import ConfigError
from ske2grid.training import evaluate


@pytest.fixture
def base_config():
    """A small star9 base run on a 3×3 grid."""
    return load_run_config(
        overrides={
            "dataset.graph": "star9",
            "grid.stages": ["3x3"],
            "train.epochs": 1,
            "dtype": "f64",
        }
    )


def fake_result(mocker, top1):
    return mocker.Mock(final=mocker.Mock(val_top1=top1))


class TestArms:
    """Per-arm config derivation."""

    def test_baseline(self, base_config):
        """The baseline swaps the model kind and trains one stage."""
        cfg, progressive = arm_config(base_config, "gcn-baseline")
        assert cfg.model.kind == "gcn-baseline" and not progressive

    def test_git_only(self, base_config):
        """GIT without UPT uses the surjective assignment."""
        cfg, _ = arm_config(base_config, "git-only")
        assert cfg.ablation.git_mode == "surjective"
        assert not cfg.ablation.use_upt

    def test_git_upt(self, base_config):
        """UPT + GIT is bijective with learned transforms."""
        cfg, progressive = arm_config(base_config, "git+upt")
        assert cfg.ablation.git_mode == "bijective" and cfg.ablation.use_upt
        assert not progressive

    def test_pls_adds_a_stage(self, base_config):
        """A single configured grid grows by one in each extent."""
        cfg, progressive = arm_config(base_config, "git+upt+pls")
        assert progressive
        assert cfg.grid.stages == ["3x3", "4x4"]

    def test_pls_keeps_configured_stages(self, base_config):
        """A configured cascade is used as is."""
        base = base_config.model_copy(deep=True)
        base.grid.stages = ["3x3", "5x5"]
        cfg, _ = arm_config(base, "git+upt+pls")
        assert cfg.grid.stages == ["3x3", "5x5"]

    def test_fixed_transforms(self, base_config):
        """Fixed transforms are not learned."""
        cfg, _ = arm_config(base_config, "fixed-transforms")
        assert not cfg.ablation.learn_transforms

    def test_gcn_grid(self, base_config):
        """Graph convolution over the grid lattice."""
        cfg, _ = arm_config(base_config, "gcn-grid")
        assert cfg.model.kind == "gcn-grid"

    def test_unknown_arm(self, base_config):
        """Unknown arms name the ablation.arms key."""
        with pytest.raises(ConfigError) as exc:
            arm_config(base_config, "magic")
        assert exc.value.key == "ablation.arms"

    def test_all_arms_known(self, base_config):
        """Every listed arm derives a config."""
        for arm in ARM_NAMES:
            arm_config(base_config, arm)


class TestPlanning:
    """Expanding arms × seeds."""

    def test_plan_size_and_dirs(self, base_config, tmp_path):
        """One run per arm and seed, each in its own directory."""
        plan = plan_ablation(base_config, ["git-only", "git+upt"], [0, 1], 9, tmp_path)
        assert len(plan) == 4
        assert plan[1].out_dir == tmp_path / "git-only" / "seed1"
        assert plan[1].cfg.seed == 1 and plan[1].cfg.train.seed == 1

    def test_duplicate_arms_get_labels(self, base_config):
        """Repeated arms are told apart."""
        plan = plan_ablation(base_config, ["git+upt", "git+upt"], [0], 9)
        assert [run.label for run in plan] == ["git+upt", "git+upt#2"]

    @pytest.mark.parametrize("seeds", [[], [1, 1]])
    def test_bad_seeds(self, base_config, seeds):
        """Seeds must be given and distinct."""
        with pytest.raises(ConfigError):
            plan_ablation(base_config, ["git+upt"], seeds, 9)

    def test_no_arms(self, base_config):
        """At least one arm is needed."""
        with pytest.raises(ConfigError):
            plan_ablation(base_config, [], [0], 9)

    def test_invalid_arm_fails_before_training(self, base_config, mocker):
        """A grid too small for the joints stops the whole plan up front."""
        spy = mocker.patch("ske2grid.ablation.run_training")
        with pytest.raises(ConfigError):
            plan_ablation(base_config, ["gcn-baseline", "git+upt"], [0], 17)
        spy.assert_not_called()


class TestReport:
    """Summaries, trends and files."""

    def test_summary_statistics(self):
        """Mean and sample standard deviation over seeds."""
        summary = ArmSummary("a", "a", {0: 0.5, 1: 0.7})
        assert summary.mean == pytest.approx(0.6)
        assert summary.std == pytest.approx(0.1414213562)
        assert ArmSummary("b", "b", {0: 0.4}).std == 0.0

    @pytest.mark.parametrize(
        "difference,tolerance,status",
        [(0.1, 0.05, "holds"), (-0.1, 0.05, "violated"), (0.02, 0.05, "inconclusive")],
    )
    def test_trend_status(self, difference, tolerance, status):
        """Differences within one standard deviation are inconclusive."""
        assert TrendCheck("x", "y", difference, tolerance).status == status

    def test_trends_only_for_present_pairs(self):
        """Pairs with a missing arm are skipped."""
        report = AblationReport(
            [ArmSummary("git+upt", "git+upt", {0: 0.8}), ArmSummary("git-only", "git-only", {0: 0.6})],
            [0],
        )
        (check,) = report.trends()
        assert (check.better, check.worse) == ("git+upt", "git-only")
        assert check.status == "holds"

    def test_run_ablation_collects_scores(self, base_config, tiny_dataset, mocker, tmp_path):
        """Every planned run reports into its arm's summary."""
        scores = iter([0.5, 0.6, 0.9, 0.8])
        mocker.patch(
            "ske2grid.ablation.run_training",
            side_effect=lambda *args, **kwargs: fake_result(mocker, next(scores)),
        )
        report = run_ablation(base_config, tiny_dataset, ["git-only", "git+upt"], [0, 1], tmp_path)
        assert report.by_arm("git-only").top1 == {0: 0.5, 1: 0.6}
        assert report.by_arm("git+upt").mean == pytest.approx(0.85)
        assert report.config_hash == base_config.config_hash()

    def test_reported_score_matches_checkpoint_eval(self, base_config, tiny_dataset, tmp_path):
        """An arm's top-1 is what evaluating its saved checkpoint gives."""
        report = run_ablation(base_config, tiny_dataset, ["git+upt"], [0], tmp_path)
        checkpoint = load_checkpoint(tmp_path / "git+upt" / "seed0" / "stage1_3x3.sk2g")
        recognizer = restore_recognizer(checkpoint)
        result = evaluate(recognizer, tiny_dataset, "val", frames=checkpoint.metadata["frames"])
        assert report.by_arm("git+upt").top1[0] == result.top1

    def test_csv_files(self, tmp_path):
        """ablation.csv has one row per arm; the trends file one row per pair."""
        report = AblationReport(
            [ArmSummary("git+upt", "git+upt", {0: 0.8, 1: 0.9}), ArmSummary("git-only", "git-only", {0: 0.6, 1: 0.7})],
            [0, 1],
        )
        rows = list(csv.reader(write_ablation_csv(tmp_path / "ablation.csv", report).open()))
        assert rows[0] == ["arm", "seeds", "mean_top1", "std_top1", "seed0", "seed1"]
        assert rows[1][:2] == ["git+upt", "2"]
        trends = list(csv.reader(write_trends_csv(tmp_path / "trends.csv", report).open()))
        assert trends[0] == ["better", "worse", "difference", "tolerance", "status"]
        assert len(trends) == 2
