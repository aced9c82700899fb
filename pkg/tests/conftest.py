"""
Pytest configuration and fixtures for hpl tests

Everything here is tiny on purpose: 8x8 grayscale images, three classes and
an 8-bit code, so the whole suite (minus `slow`) runs in seconds.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from hash_model import HashModel, HashModelConfig
from poison_pipeline import SyntheticDatasetSpec, synthesize_dataset
from run_config import (
    RunConfig, ModelSection, TriggerSection, PoisonSection, DefenseSection,
)
from tensor_core import SgdSchedule
from attack_kit import PerturbationBudget
from eval_metrics import EvalConfig


# ===== Shared fixtures =====

TINY_DIMS = (8, 8, 1)


@pytest.fixture
def tiny_spec():
    return SyntheticDatasetSpec(classes=3, per_class_train=10, per_class_query=3, per_class_db=8,
                                dims=TINY_DIMS, seed=0)


@pytest.fixture
def tiny_splits(tiny_spec):
    """(train, query, database) for the tiny dataset."""
    return synthesize_dataset(tiny_spec)


@pytest.fixture
def tiny_model_config():
    return HashModelConfig(input_dims=TINY_DIMS, hidden_sizes=(6,), code_length=8, seed=3)


@pytest.fixture
def tiny_model(tiny_model_config):
    return HashModel.init(tiny_model_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_run_config(out_dir, **changes) -> RunConfig:
    cfg = RunConfig(
        dataset=SyntheticDatasetSpec(classes=3, per_class_train=10, per_class_query=3, per_class_db=8,
                                     dims=TINY_DIMS),
        model=ModelSection(hidden_sizes=(8,), code_length=8),
        schedule=SgdSchedule(epochs=3, batch_size=8),
        trigger=TriggerSection(size=2, iterations=5, batch_size=8, step_size=2.0),
        budget=PerturbationBudget(epsilon=0.032, step_size=0.01, epochs=2, batch_size=4),
        poison=PoisonSection(target_label=0, poison_count=4, lam=0.8),
        eval=EvalConfig(top_n=20, precision_ks=(1, 5)),
        defenses=DefenseSection(prune_counts=(0, 2, 4, 8), dp=True, dp_sigmas=(0.0, 0.1)),
        out_dir=str(out_dir),
    )
    for key, value in changes.items():
        cfg = cfg.with_override(key, value) if key != "out_dir" else cfg.with_out(value)
    return cfg


@pytest.fixture
def tiny_run_config(tmp_path):
    """Fast RunConfig writing into a fresh temporary directory."""
    return make_tiny_run_config(tmp_path / "run")
