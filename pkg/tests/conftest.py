"""Shared fixtures: one small synthetic corpus reused across test modules."""

import pytest

from milslide import slide as sl
from milslide.mil import TrainConfig
from milslide.numerics import ModelConfig

# 20 slides, seed chosen so every split holds both classes (checked in tests)
TINY = dict(n_slides=20, prevalence=0.3, seed=2, side=256, lesion_fraction=0.05)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    entries = sl.generate_corpus(str(out), **TINY)
    return out, entries


@pytest.fixture(scope="session")
def tiny_bags(tiny_corpus):
    _, entries = tiny_corpus
    return {split: sl.bags_from_manifest(entries, splits=(split,))
            for split in ("train", "val", "test")}


def small_model():
    return ModelConfig(conv_layers=((4, 3, 2),), pool=(2,), hidden_units=8)


@pytest.fixture()
def quick_config():
    return TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=3, model=small_model())
