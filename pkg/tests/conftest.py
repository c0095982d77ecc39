"""Pytest configuration and fixtures."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent to path
sys.path.insert(0, str(Path(__file__).parent.parent))
from ske2grid.network import ModelConfig, Recognizer, build_model
from ske2grid.skeleton import SkeletonDataset, builtin_skeleton, generate_synthetic, generator_preset
from ske2grid.training import TrainConfig
from ske2grid.transform import GridSize, TransformOptions, build_cascade


@pytest.fixture
def rng():
    """Seeded generator for randomized property tests."""
    return np.random.default_rng(1234)


@pytest.fixture
def chain17():
    """The 17-joint path skeleton with self-loops."""
    return builtin_skeleton("chain17")


@pytest.fixture
def star9():
    """The 9-joint hub skeleton with self-loops."""
    return builtin_skeleton("star9")


@pytest.fixture
def tiny_dataset(star9):
    """Two clean classes on star9, 6 sequences each, 8 frames."""
    sequences, manifest = generate_synthetic(
        star9, 2, 6, 8, seed=3, params=generator_preset("clean")
    )
    return SkeletonDataset(star9, sequences, manifest)


@pytest.fixture
def tiny_train_config():
    """One short f64 epoch; small enough for unit tests."""
    return TrainConfig.desk(epochs=1, batch_size=4, lr=0.05, dtype="f64", seed=0)


def make_tiny_recognizer(graph, grids, n_classes=2, kind="ske2grid", seed=0, options=None):
    """A one-block recognizer over ``grids`` (a cascade when more than one)."""
    grid = grids[-1] if kind != "gcn-baseline" else GridSize(1, graph.n_joints)
    cfg = ModelConfig.preset("small", grid, n_classes, 3, 3)
    cfg.blocks = cfg.blocks[:1]
    model = build_model(cfg, kind, graph, seed, "f64")
    cascade = None
    if kind != "gcn-baseline":
        cascade = build_cascade(graph.n_joints, grids, seed, options or TransformOptions(), "f64")
    return Recognizer(graph, model, cascade)


@pytest.fixture
def tiny_recognizer(star9):
    """star9 → 3×3 grid, single block, two classes."""
    return make_tiny_recognizer(star9, [GridSize(3, 3)])


@pytest.fixture
def write_config(tmp_path):
    """Write a TOML run configuration and return its path."""

    def _write(text, name="run.toml"):
        path = tmp_path / name
        path.write_text(text)
        return path

    return _write
