"""Shared fixtures and the ``slow`` marker for desk-scale training checks."""

import numpy as np
import pytest

import numerics
from backbone import Backbone, ViTConfig
from data import CorpusSpec, generate_corpus, load_split
from numerics import Rng


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# =============================================================================
# Fixtures
# =============================================================================

@pytest.fixture
def rng():
    return Rng(0)


@pytest.fixture
def float64():
    """Build tensors in 64-bit for gradient checks."""
    with numerics.precision(np.float64):
        yield


@pytest.fixture
def tiny_config():
    """2 blocks, width 16, 2x2 patch grid, 1 register: T = 1 + 1 + 4 tokens."""
    return ViTConfig(image_size=8, patch_size=4, depth=2, width=16, heads=2, registers=1)


@pytest.fixture
def small_config():
    """4 blocks, width 16, 4x4 patch grid, 2 registers."""
    return ViTConfig(image_size=16, patch_size=4, depth=4, width=16, heads=2, registers=2)


@pytest.fixture
def small_backbone(small_config):
    return Backbone(small_config, Rng(1))


@pytest.fixture
def tiny_spec():
    return CorpusSpec(
        train_real=6, train_fake=6,
        val_real=4, val_fake=4,
        test_real=4, test_fake=4,
        val_unseen_real=2, val_unseen_fake=2,
        test_unseen_real=2, test_unseen_fake=2,
        image_size=16, seed=3,
    )


@pytest.fixture
def tiny_corpus(tmp_path, tiny_spec):
    """A rendered corpus on disk; returns the manifest."""
    return generate_corpus(tiny_spec, tmp_path / "corpus")


@pytest.fixture
def tiny_splits(tiny_corpus):
    return {split: load_split(tiny_corpus, split) for split in ("train", "val", "test")}
