"""Shared fixtures: one synthetic dataset reused across harness/CLI/acceptance
tests, with features prepared at the desk-scale patch width."""

import numpy as np
import pytest

from respdl import harness, ingest, synth
from respdl.nn import TrainConfig


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synthdata")
    synth.generate(d, n_recordings=40, n_classes=4, seed=0)
    return d


@pytest.fixture(scope="session")
def synth_manifest(synth_dir):
    return ingest.build_manifest(synth_dir, synth_dir / "diagnosis.csv", "Task1_4class")


@pytest.fixture(scope="session")
def synth_features(synth_manifest):
    return harness.build_features(synth_manifest, "Task1_4class", 0.5)


@pytest.fixture(scope="session")
def synth_folds(synth_manifest):
    return ingest.make_folds(synth_manifest, 5, 7, "Task1_4class")


def desk_config(model="cnn_moe", **overrides):
    """Fast, convergent configuration for the synthetic dataset."""
    base = dict(
        task="Task1_4class",
        model=model,
        min_cycle_seconds=0.5,
        patch_width=32,
        k=5,
        fold_seed=7,
        mixup=False,
        gru_hidden=64,
        early_stop_acc=0.999,
        early_stop_patience=4,
        train=TrainConfig(epochs=60, batch_size=8, lr=1e-3, seed=11),
    )
    base.update(overrides)
    return harness.ExperimentConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
