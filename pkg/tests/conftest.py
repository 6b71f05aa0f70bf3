from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from ssnet.data import Dataset, synth_generate, write_dataset
from ssnet.net import EncoderConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder_cfg() -> EncoderConfig:
    """Two downsamplers (f=4) and one block: fast enough for training smoke tests."""
    return EncoderConfig(
        num_classes=4,
        widths=(8, 16),
        module_counts=(0, 1),
        dilations=(2,),
        early_modules=1,
    )


@pytest.fixture
def small_dataset() -> Dataset:
    return synth_generate(seed=3, count=6, height=32, width=32, max_shapes=2)


@pytest.fixture
def dataset_dir(tmp_path: Path, small_dataset: Dataset) -> Path:
    out = tmp_path / "data"
    write_dataset(small_dataset, out)
    return out
