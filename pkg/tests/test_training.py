"""Tests for the optimizer, schedules, the training loop and progressive stages."""

import csv
import math

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import make_tiny_recognizer
from ske2grid import training
from ske2grid.errors import ConfigError, NonFiniteError
from ske2grid.skeleton import SkeletonDataset, generate_synthetic, generator_preset
from ske2grid.tensor import Tensor
from ske2grid.training import (
    METRICS_HEADER,
    SGD,
    MetricRow,
    PlsSchedule,
    TrainConfig,
    evaluate,
    iterate_batches,
    learning_rate,
    make_batch,
    run_pls,
    sgd_step,
    stage_file_stem,
    train_stage,
    write_confusion_csv,
    write_metrics_csv,
)
from ske2grid.transform import GridSize, freeze_prefix


class ConstantRecognizer:
    """Always predicts class 0."""

    training = False
    dtype = np.float64

    def __init__(self, n_classes):
        self.n_classes = n_classes

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x):
        logits = np.zeros((x.shape[0], self.n_classes))
        logits[:, 0] = 5.0
        return Tensor(logits)


class TestSgd:
    """The update rule."""

    def test_nesterov_trace(self):
        """Two steps on θ² from θ=1: 0.62 then 0.2224."""
        theta = np.array([1.0])
        state = {}
        for expected in (0.62, 0.2224):
            sgd_step({"t": theta}, {"t": 2 * theta}, state, lr=0.1, momentum=0.9, nesterov=True)
            assert theta[0] == pytest.approx(expected, abs=1e-12)

    def test_heavy_ball(self):
        """Without Nesterov the step is lr·v."""
        theta = np.array([1.0])
        state = {}
        sgd_step({"t": theta}, {"t": 2 * theta}, state, lr=0.1, momentum=0.9, nesterov=False)
        assert theta[0] == pytest.approx(0.8)
        sgd_step({"t": theta}, {"t": 2 * theta}, state, lr=0.1, momentum=0.9, nesterov=False)
        assert theta[0] == pytest.approx(0.8 - 0.1 * (0.9 * 2 + 1.6))

    def test_weight_decay(self):
        """Decay adds wd·θ to the gradient."""
        theta = np.array([2.0])
        sgd_step({"t": theta}, {"t": np.zeros(1)}, {}, lr=0.5, momentum=0.0, weight_decay=0.1)
        assert theta[0] == pytest.approx(1.9)

    def test_missing_gradient_skipped(self):
        """Parameters without a gradient do not move."""
        theta = np.array([3.0])
        sgd_step({"t": theta}, {"t": None}, {}, lr=1.0, weight_decay=0.5)
        assert theta[0] == 3.0

    def test_non_finite_gradient_aborts_before_update(self):
        """No parameter moves when any gradient is non-finite."""
        a, b = np.array([1.0]), np.array([1.0])
        with pytest.raises(NonFiniteError):
            sgd_step({"a": a, "b": b}, {"a": np.ones(1), "b": np.array([np.nan])}, {}, lr=0.1)
        assert a[0] == 1.0 and b[0] == 1.0

    def test_lr_scale(self):
        """Per-parameter scales multiply the step."""
        optimizer = SGD({"w": Tensor([1.0]), "stage1.psi": Tensor([1.0])}, momentum=0.0, lr_scale={"stage1.psi": 10.0})
        for p in optimizer.params.values():
            p.grad = np.ones(1)
        optimizer.step(0.01)
        assert optimizer.params["w"].data[0] == pytest.approx(0.99)
        assert optimizer.params["stage1.psi"].data[0] == pytest.approx(0.9)


class TestSchedule:
    """Learning-rate schedules and the config model."""

    def test_step_schedule(self):
        """×0.1 at epochs 10 and 50."""
        cfg = TrainConfig()
        assert learning_rate(cfg, 0) == pytest.approx(0.1)
        assert learning_rate(cfg, 10) == pytest.approx(0.01)
        assert learning_rate(cfg, 50) == pytest.approx(0.001)

    def test_cosine_schedule(self):
        """Cosine starts at lr and reaches lr/2 halfway."""
        cfg = TrainConfig.desk(epochs=4, lr=0.2)
        assert learning_rate(cfg, 0, 0, 10) == pytest.approx(0.2)
        assert learning_rate(cfg, 2, 0, 10) == pytest.approx(0.1)

    def test_defaults(self):
        """Large-run defaults."""
        cfg = TrainConfig()
        assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov) == (0.1, 0.9, 5e-4, True)
        assert cfg.epochs == 80 and cfg.milestones == [10, 50]

    def test_unknown_field_rejected(self):
        """Typos fail validation."""
        with pytest.raises(ValidationError):
            TrainConfig(lrr=0.1)


class TestBatching:
    """Index batches and batch tensors."""

    def test_batches_cover_everything_once(self, rng):
        """Shuffled batches partition the indices."""
        batches = list(iterate_batches(10, 3, rng))
        assert [len(b) for b in batches] == [3, 3, 3, 1]
        assert sorted(np.concatenate(batches)) == list(range(10))

    def test_make_batch_harmonizes(self, tiny_dataset):
        """Clips are cropped or padded to the requested length."""
        x, labels = make_batch(tiny_dataset.sequences, [0, 7], 6, np.float64)
        assert x.shape == (2, 6, 9, 3)
        assert list(labels) == [tiny_dataset.sequences[0].label, tiny_dataset.sequences[7].label]


class TestTrainStage:
    """The single-stage loop."""

    def test_deterministic(self, star9, tiny_dataset, tiny_train_config):
        """Same seed and data: identical weights and metrics."""
        runs = []
        for _ in range(2):
            recognizer = make_tiny_recognizer(star9, [GridSize(3, 3)])
            result = train_stage(recognizer, tiny_dataset, tiny_train_config)
            runs.append((recognizer, result))
        (a, ra), (b, rb) = runs
        assert [(r.loss, r.top1) for r in ra.history] == [(r.loss, r.top1) for r in rb.history]
        for name, value in a.model.state_dict().items():
            assert np.array_equal(value, b.model.state_dict()[name])

    def test_history_rows(self, tiny_recognizer, tiny_dataset, tiny_train_config):
        """One train and one val row per epoch."""
        cfg = tiny_train_config.model_copy(update={"epochs": 2})
        result = train_stage(tiny_recognizer, tiny_dataset, cfg)
        assert [(r.epoch, r.split) for r in result.history] == [
            (1, "train"), (1, "val"), (2, "train"), (2, "val"),
        ]
        assert result.steps == 2 * math.ceil(len(tiny_dataset.split("train")) / cfg.batch_size)
        assert result.val_top1 == result.history[-1].top1

    def test_zero_learning_rate_keeps_parameters(self, tiny_recognizer, tiny_dataset, tiny_train_config):
        """lr = 0 leaves every parameter bitwise unchanged."""
        before = {n: p.data.copy() for n, p in tiny_recognizer.named_parameters(False).items()}
        cfg = tiny_train_config.model_copy(update={"lr": 0.0})
        train_stage(tiny_recognizer, tiny_dataset, cfg)
        for name, p in tiny_recognizer.named_parameters(False).items():
            assert np.array_equal(p.data, before[name]), name

    def test_frozen_stage_untouched(self, star9, tiny_dataset, tiny_train_config):
        """A frozen first stage stays bitwise identical over 100 steps; the second one learns."""
        recognizer = make_tiny_recognizer(star9, [GridSize(3, 3), GridSize(4, 4)])
        freeze_prefix(recognizer.cascade, 1)
        first = recognizer.cascade.stages[0]
        stage1 = {n: t.data.copy() for n, t in first.named_parameters("s").items()}
        psi1 = first.git.psi.data.copy()
        phi1 = first.git.current_phi().copy()
        lam2 = recognizer.cascade.stages[1].upt.lam.data.copy()
        cfg = tiny_train_config.model_copy(update={"epochs": 40})
        result = train_stage(recognizer, tiny_dataset, cfg, max_steps=100)
        assert result.steps == 100
        for name, tensor in first.named_parameters("s").items():
            assert np.array_equal(tensor.data, stage1[name]), name
        assert np.array_equal(first.git.psi.data, psi1)
        assert np.array_equal(first.git.current_phi(), phi1)
        assert not np.array_equal(recognizer.cascade.stages[1].upt.lam.data, lam2)

    def test_memorizes_small_training_set(self, star9):
        """2 classes × 8 noisy clips reach 100% train accuracy within 200 full-batch steps."""
        sequences, manifest = generate_synthetic(
            star9, 2, 8, 8, seed=11, params=generator_preset("moderate")
        )
        dataset = SkeletonDataset(star9, sequences, manifest)
        n_train = len(dataset.split("train"))
        cfg = TrainConfig(
            lr=0.05, epochs=200, batch_size=n_train, milestones=[], weight_decay=0.0, dtype="f64"
        )
        recognizer = make_tiny_recognizer(star9, [GridSize(3, 3)])
        result = train_stage(recognizer, dataset, cfg, max_steps=200)
        assert result.steps <= 200
        assert max(row.top1 for row in result.history if row.split == "train") == 1.0

    def test_max_steps(self, tiny_recognizer, tiny_dataset, tiny_train_config):
        """max_steps stops the loop early."""
        result = train_stage(tiny_recognizer, tiny_dataset, tiny_train_config, max_steps=1)
        assert result.steps == 1

    def test_checkpoint_metadata(self, tiny_recognizer, tiny_dataset, tiny_train_config):
        """The stage checkpoint records its metrics and settings."""
        result = train_stage(tiny_recognizer, tiny_dataset, tiny_train_config, metadata={"seed": 0})
        meta = result.checkpoint.metadata
        assert meta["seed"] == 0 and meta["stage_index"] == 1
        assert len(meta["metrics"]) == 2
        assert meta["train"]["batch_size"] == 4


class TestEvaluate:
    """Evaluation and result files."""

    def test_constant_predictor(self, tiny_dataset):
        """Predicting class 0 scores the share of class-0 clips."""
        val = tiny_dataset.split("val")
        result = evaluate(ConstantRecognizer(2), tiny_dataset, "val")
        share = sum(1 for s in val if s.label == 0) / len(val)
        assert result.top1 == pytest.approx(share)
        assert result.confusion[:, 1].sum() == 0
        assert result.confusion.sum() == len(val)

    def test_threads_do_not_change_results(self, tiny_recognizer, tiny_dataset):
        """Sharding batches over threads gives the same scores."""
        serial = evaluate(tiny_recognizer, tiny_dataset, "all", batch_size=3)
        threaded = evaluate(tiny_recognizer, tiny_dataset, "all", batch_size=3, threads=4)
        assert np.array_equal(serial.scores, threaded.scores)

    def test_restores_training_mode(self, tiny_recognizer, tiny_dataset):
        """A training recognizer is back in training mode afterwards."""
        tiny_recognizer.train()
        evaluate(tiny_recognizer, tiny_dataset)
        assert tiny_recognizer.training

    def test_metrics_csv(self, tmp_path):
        """Header then one row per entry."""
        path = write_metrics_csv(tmp_path / "m.csv", [MetricRow(1, "train", 0.5, 0.25)])
        rows = list(csv.reader(path.open()))
        assert tuple(rows[0]) == METRICS_HEADER
        assert rows[1] == ["1", "train", "0.5", "0.25"]

    def test_confusion_csv(self, tmp_path):
        """Rows are true classes, columns predictions."""
        path = write_confusion_csv(tmp_path / "c.csv", np.array([[2, 1], [0, 3]]), ["a", "b"])
        assert path.read_text() == "true\\predicted,a,b\na,2,1\nb,0,3\n"


class TestProgressive:
    """Stage schedules and the progressive run."""

    def test_schedule_must_grow(self):
        """Grids must grow in both extents."""
        with pytest.raises(ConfigError):
            PlsSchedule([GridSize(5, 5), GridSize(6, 5)]).validate(17)

    def test_first_grid_must_fit_joints(self):
        """With up-sampling the first grid needs at least N cells."""
        with pytest.raises(ConfigError):
            PlsSchedule([GridSize(4, 4)]).validate(17)
        PlsSchedule([GridSize(4, 4)]).validate(17, use_upt=False)

    def test_stage_budget_count(self):
        """One epoch budget per grid."""
        with pytest.raises(ConfigError):
            PlsSchedule([GridSize(5, 5), GridSize(6, 6)], [3]).validate(17)

    def test_stage_file_stem(self):
        """stage<k>_<H>x<W>."""
        assert stage_file_stem(2, GridSize(6, 6)) == "stage2_6x6"

    def test_two_stage_run(self, tmp_path, tiny_dataset, tiny_train_config):
        """Stage 2 warm-starts, freezes stage 1 and writes per-stage files."""
        schedule = PlsSchedule([GridSize(3, 3), GridSize(4, 4)], [1, 1])
        seen = []
        result = run_pls(
            schedule,
            tiny_dataset,
            tiny_train_config,
            temporal_kernel=3,
            out_dir=tmp_path,
            on_epoch=lambda stage, epoch, rows: seen.append((stage, epoch)),
        )
        assert seen == [(1, 1), (2, 1)]
        assert [r.grid for r in result.stages] == [GridSize(3, 3), GridSize(4, 4)]
        assert (tmp_path / "stage1_3x3.sk2g").exists()
        assert (tmp_path / "stage2_4x4_metrics.csv").exists()
        cascade = result.recognizer.cascade
        assert cascade.frozen_prefix == 1
        stage1 = result.stages[0].checkpoint.tensors
        assert np.array_equal(cascade.stages[0].upt.lam.data, stage1["stage1.lambda"])
        assert np.array_equal(cascade.stages[0].git.psi.data, stage1["stage1.psi"])
        assert np.array_equal(cascade.stages[0].git.current_phi(), stage1["stage1.phi"])
        assert result.final.checkpoint.metadata["frozen_stages"] == ["stage1"]

    def test_second_stage_starts_from_first_checkpoint(self, tiny_dataset, tiny_train_config, mocker):
        """Before its first step the stage-2 network equals the stage-1 checkpoint bitwise."""
        real_train_stage = training.train_stage
        starts = {}

        def record_start(recognizer, dataset, cfg, frames, stage_index, *args, **kwargs):
            starts[stage_index] = {k: v.copy() for k, v in recognizer.model.state_dict().items()}
            return real_train_stage(recognizer, dataset, cfg, frames, stage_index, *args, **kwargs)

        mocker.patch("ske2grid.training.train_stage", side_effect=record_start)
        schedule = PlsSchedule([GridSize(3, 3), GridSize(4, 4)], [1, 1])
        result = run_pls(schedule, tiny_dataset, tiny_train_config, temporal_kernel=3)
        checkpoint = result.stages[0].checkpoint
        assert set(starts[2]) == set(checkpoint.network_names)
        for name, value in starts[2].items():
            assert value.dtype == checkpoint.tensors[name].dtype
            assert np.array_equal(value, checkpoint.tensors[name]), name

    def test_invalid_chain_fails_before_training(self, tiny_dataset, tiny_train_config, mocker):
        """A bad schedule never reaches the training loop."""
        spy = mocker.patch("ske2grid.training.train_stage")
        with pytest.raises(ConfigError):
            run_pls(PlsSchedule([GridSize(3, 3), GridSize(3, 4)]), tiny_dataset, tiny_train_config)
        spy.assert_not_called()
