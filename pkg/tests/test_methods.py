import numpy as np
import pytest

from piba import methods as mt
from piba import models as md
from piba import synthdata as sd


@pytest.fixture(scope="module")
def small_world():
    ds = sd.gen_patch_dataset(6, 20)
    model = md.SmallCnn(seed=0)
    md.train_classifier(model, ds, epochs=3, lr=1e-3, seed=0)
    tds = sd.gen_token_dataset(6, 20)
    rnn = md.SmallRnn(seed=0)
    md.train_classifier(rnn, tds, epochs=3, lr=3e-3, seed=0)
    return ds, model, tds, rnn


def test_unknown_method_rejected(small_world):
    ds, model, _, _ = small_world
    with pytest.raises(ValueError):
        mt.attribute_one(model, ds, "test", 0, "gradcam", seed=0)


@pytest.mark.parametrize("method", ["ig", "random", "iba"])
def test_cnn_methods_give_normalized_2d_maps(small_world, method):
    ds, model, _, _ = small_world
    amap = mt.attribute_one(model, ds, "test", 1, method, seed=3)
    assert amap.values.shape == (16, 16)
    assert amap.values.min() >= 0.0 and amap.values.max() <= 1.0
    assert amap.provenance["method"] == method
    assert amap.provenance["index"] == 1


@pytest.mark.parametrize("method", ["ig", "random", "iba"])
def test_rnn_methods_give_per_token_maps(small_world, method):
    _, _, tds, rnn = small_world
    amap = mt.attribute_one(rnn, tds, "test", 2, method, seed=3)
    assert amap.values.shape == (32,)
    assert amap.values.min() >= 0.0 and amap.values.max() <= 1.0


def test_methods_are_seed_deterministic(small_world):
    ds, model, _, _ = small_world
    a = mt.attribute_one(model, ds, "test", 0, "random", seed=5)
    b = mt.attribute_one(model, ds, "test", 0, "random", seed=5)
    c = mt.attribute_one(model, ds, "test", 0, "random", seed=6)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_target_prob_fn_is_a_probability(small_world):
    ds, model, _, _ = small_world
    prob = mt.target_prob_fn(model, 1)(ds["test"].images[:4])
    assert prob.shape == (4,)
    assert np.all((prob >= 0) & (prob <= 1))
    logit = mt.target_logit_fn(model, 1)(ds["test"].images[:4])
    assert logit.shape == (4,)
