"""Shared fixtures: a tiny 64-bit model and a byte-level corpus."""

import typing as t
from pathlib import Path

import numpy as np
import pytest

from sdtp.core.models import ModelParams, init_model
from sdtp.core.pruning import build_schedule, init_scorers
from sdtp.schemas.config import TrainConfig
from sdtp.schemas.model import ModelConfig
from sdtp.schemas.schedule import PruneSchedule
from sdtp.utils.corpus import encode, make_windows

SAMPLE_TEXT: str = (
    "the quick brown fox jumps over the lazy dog. "
    "a stitch in time saves nine. "
    "all that glitters is not gold. "
) * 12


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        n_layers=4,
        d_model=16,
        n_heads=2,
        d_ff=64,
        vocab_size=256,
        max_seq_len=64,
        seed=0,
    )


@pytest.fixture
def tiny_params(tiny_config: ModelConfig) -> ModelParams:
    return init_model(tiny_config, dtype=np.float64)


@pytest.fixture
def tiny_schedule() -> PruneSchedule:
    return build_schedule(3, 0.8, 1, 1, 4, sink_count=2, local_fraction=0.1)


@pytest.fixture
def tiny_scorers(tiny_schedule: PruneSchedule) -> t.Any:
    return init_scorers(
        len(tiny_schedule.stages), 16, seed=0, dtype=np.float64
    )


@pytest.fixture
def windows() -> np.ndarray:
    return make_windows(encode(SAMPLE_TEXT), 16)


@pytest.fixture
def long_windows() -> np.ndarray:
    return make_windows(encode(SAMPLE_TEXT), 48)


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(
        epochs=1,
        batch_size=2,
        window_length=16,
        pair_budget=64,
        max_steps=3,
    )


@pytest.fixture
def corpus_file(tmp_path: Path) -> Path:
    path = tmp_path / "corpus.txt"
    path.write_text(SAMPLE_TEXT, encoding="utf-8")
    return path
