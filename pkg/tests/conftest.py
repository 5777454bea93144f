"""Shared fixtures. The expensive ones (trained models, InputIBA map banks)
are session-scoped so the acceptance criteria can share them."""

import numpy as np
import pytest

from piba import models as md
from piba import synthdata as sd
from piba.methods import attribute_one
from piba.synthdata import Dataset, PatchImageSet

IMAGE_SEED = 7
TOKEN_SEED = 7
N_PER_SPLIT = 300
ROAR_N = 60


@pytest.fixture(scope="session")
def image_ds():
    return sd.gen_patch_dataset(IMAGE_SEED, N_PER_SPLIT)


@pytest.fixture(scope="session")
def token_ds():
    return sd.gen_token_dataset(TOKEN_SEED, N_PER_SPLIT)


@pytest.fixture(scope="session")
def cnn_model(image_ds):
    model = md.SmallCnn(seed=1)
    md.train_classifier(model, image_ds, epochs=30, lr=1e-3, seed=1,
                        batch_size=8)
    return model


@pytest.fixture(scope="session")
def rnn_model(token_ds):
    model = md.SmallRnn(seed=1)
    md.train_classifier(model, token_ds, epochs=30, lr=3e-3, seed=1,
                        batch_size=8)
    return model


def _map_bank(model, ds, split, count, base_seed):
    maps = []
    for i in range(count):
        amap = attribute_one(model, ds, split, i, "inputiba",
                             seed=base_seed + i)
        maps.append(amap.values)
    return np.stack(maps)


@pytest.fixture(scope="session")
def iiba_test_maps(cnn_model, image_ds):
    """InputIBA maps for the first 100 test images."""
    return _map_bank(cnn_model, image_ds, "test", 100, base_seed=1000)


@pytest.fixture(scope="session")
def roar_setup(cnn_model, image_ds, iiba_test_maps):
    """A 60-per-split slice of the image dataset with InputIBA maps for
    every image in it (test-split maps are shared with iiba_test_maps)."""
    small = Dataset("image")
    for split in ("train", "val", "test"):
        s = image_ds[split]
        small.splits[split] = PatchImageSet(
            s.images[:ROAR_N].copy(), s.labels[:ROAR_N].copy(),
            s.bboxes[:ROAR_N], split)
    maps = {
        "train": _map_bank(cnn_model, image_ds, "train", ROAR_N,
                           base_seed=3000),
        "val": _map_bank(cnn_model, image_ds, "val", ROAR_N, base_seed=4000),
        "test": iiba_test_maps[:ROAR_N],
    }
    return small, maps


@pytest.fixture(scope="session")
def rnn_test_maps(rnn_model, token_ds):
    """InputIBA maps for the first 100 test sequences."""
    return _map_bank(rnn_model, token_ds, "test", 100, base_seed=2000)
