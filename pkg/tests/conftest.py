"""Shared test fixtures for carbseg."""

from pathlib import Path

import numpy as np
import pytest

from carbseg.catalog import make_catalog
from carbseg.config import SyntheticConfig, TrainConfig
from carbseg.models import CropConfig, LabelMap
from carbseg.synthetic import SyntheticFeatureProvider, make_synthetic_dataset

# A small noiseless world: 32x32 scenes on a stride-4 lattice.
TINY_WORLD = SyntheticConfig(
    width=32,
    height=32,
    class_count=5,
    dim=8,
    small_classes=2,
    scenes=4,
    stride=4,
    sigma=0.0,
    confusion=False,
    small_min=4,
    small_max=8,
    objects_min=1,
    objects_max=2,
)
TINY_CROP = CropConfig(16, 16, 1.0, 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_world():
    return TINY_WORLD


@pytest.fixture
def tiny_dataset():
    return make_synthetic_dataset(TINY_WORLD, seed=3)


@pytest.fixture
def tiny_provider(tiny_dataset):
    return SyntheticFeatureProvider(tiny_dataset)


@pytest.fixture
def tiny_train():
    """A short two-stage schedule sized for the tiny world."""
    return TrainConfig(
        stage1_iters=10,
        stage2_iters=10,
        lr=0.1,
        momentum=0.9,
        eval_every=5,
        crop=TINY_CROP,
        seed=7,
    )


@pytest.fixture
def ab_catalog():
    return make_catalog(["A", "B"])


@pytest.fixture
def write_config(tmp_path):
    """Write ``key = value`` lines to a config file and return its path."""

    def write(values: dict, name: str = "run.cfg") -> Path:
        path = tmp_path / name
        path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
        return path

    return write


TINY_CONFIG = {
    "data": "synthetic",
    "width": 32,
    "height": 32,
    "class_count": 5,
    "dim": 8,
    "small_classes": 2,
    "scenes": 3,
    "stride": 4,
    "sigma": 0.05,
    "small_min": 4,
    "small_max": 8,
    "objects_min": 1,
    "objects_max": 2,
    "crop_w": 16,
    "crop_h": 16,
    "stage1_iters": 6,
    "stage2_iters": 6,
    "eval_every": 4,
    "view_mode": "local",
    "loss_mode": "carb",
}


@pytest.fixture
def tiny_config_file(write_config):
    return write_config(TINY_CONFIG)


def label_map(rows):
    """LabelMap from a nested list."""
    return LabelMap(np.array(rows, dtype=np.uint8))
