import numpy as np
import pytest

from piba import featbn as fb
from piba import models as md
from piba import synthdata as sd
from piba.numcore import NumericError, RngStream

# closed-form value at mask=0.5, value=1, prior=0.5, mu=0, sigma=1:
# log(0.75/0.5) + 0.25/1.125 + 0.0625/1.125 - 0.5
KL_ORACLE = np.log(1.5) + 5.0 / 18.0 - 0.5  # = 0.1832428859


def gaussian_kl(m1, s1, m2, s2):
    """KL(N(m1,s1^2) || N(m2,s2^2)), textbook form."""
    return np.log(s2 / s1) + (s1**2 + (m1 - m2) ** 2) / (2 * s2**2) - 0.5


def test_bottleneck_kl_oracle_value():
    val = fb.bottleneck_kl(0.5, 1.0, 0.5, 0.0, 1.0)
    assert abs(val - KL_ORACLE) < 1e-8


def test_bottleneck_kl_exact_zero_cases():
    # fully open prior: conditional and marginal coincide
    assert abs(fb.bottleneck_kl(0.7, 1.3, 1.0, 0.2, 0.9)) < 1e-12
    # fully closed mask: no information flows either way
    assert abs(fb.bottleneck_kl(0.0, 1.3, 0.4, 0.2, 0.9)) < 1e-12


def test_bottleneck_kl_matches_two_gaussian_form():
    rng = RngStream(77)
    for _ in range(200):
        lam = float(rng.uniform((), 0.0, 0.99))
        prior = float(rng.uniform((), 0.0, 1.0))
        v = float(rng.normal(()))
        mu = float(rng.normal(()))
        sigma = float(rng.uniform((), 0.3, 2.0))
        ours = fb.bottleneck_kl(lam, v, prior, mu, sigma)
        m1 = lam * v + (1 - lam) * mu
        s1 = (1 - lam) * sigma
        m2 = prior * lam * v + (1 - prior * lam) * mu
        s2 = (1 - prior * lam) * sigma
        assert abs(ours - gaussian_kl(m1, s1, m2, s2)) < 1e-10


def test_bottleneck_kl_input_validation():
    with pytest.raises(NumericError):
        fb.bottleneck_kl(1.0, 1.0, 0.5, 0.0, 1.0)   # mask must stay below 1
    with pytest.raises(NumericError):
        fb.bottleneck_kl(-0.1, 1.0, 0.5, 0.0, 1.0)
    with pytest.raises(NumericError):
        fb.bottleneck_kl(0.5, 1.0, 1.5, 0.0, 1.0)   # prior above 1


def test_bottleneck_kl_is_elementwise():
    lam = np.array([0.2, 0.5, 0.8])
    out = fb.bottleneck_kl(lam, 1.0, 0.5, 0.0, 1.0)
    assert out.shape == (3,)
    for i in range(3):
        assert abs(out[i] - fb.bottleneck_kl(lam[i], 1.0, 0.5, 0.0, 1.0)) < 1e-12


def test_estimate_feature_stats_matches_numpy():
    model = md.SmallCnn(seed=1)
    batch = RngStream(8).uniform((10, 1, 16, 16))
    stats = fb.estimate_feature_stats(model, "conv2", batch)
    acts = md.feature_activations(model, "conv2", batch)
    assert np.allclose(stats.mu, acts.mean(axis=0))
    expected = np.maximum(acts.std(axis=0, ddof=1), fb.SIGMA_FLOOR)
    assert np.allclose(stats.sigma, expected)
    assert stats.sigma.min() >= fb.SIGMA_FLOOR


def test_estimate_feature_stats_needs_two_samples():
    model = md.SmallCnn(seed=1)
    with pytest.raises(ValueError):
        fb.estimate_feature_stats(model, "conv2", RngStream(8).uniform((1, 1, 16, 16)))


def _tiny_setup():
    ds = sd.gen_patch_dataset(6, 20)
    model = md.SmallCnn(seed=0)
    md.train_classifier(model, ds, epochs=3, lr=1e-3, seed=0)
    stats = fb.estimate_feature_stats(model, "conv2", ds["train"].images)
    return ds, model, stats


def test_fit_feature_bottleneck_reduces_loss():
    ds, model, stats = _tiny_setup()
    s = ds["test"]
    lam, sampler, losses = fb.fit_feature_bottleneck(
        model, "conv2", s.images[0], int(s.labels[0]), stats,
        stream=RngStream(3))
    assert np.all((lam > 0) & (lam < 1))
    assert losses[-1] < losses[0]
    a = sampler(RngStream(4), n=3)
    b = sampler(RngStream(4), n=3)
    assert a.shape == (3,) + lam.shape
    assert np.array_equal(a, b)


def test_feature_capacity_nonnegative():
    ds, model, stats = _tiny_setup()
    s = ds["test"]
    lam, _, _ = fb.fit_feature_bottleneck(
        model, "conv2", s.images[0], int(s.labels[0]), stats,
        stream=RngStream(3))
    r = md.feature_activations(model, "conv2", s.images[:1])[0]
    cap = fb.feature_capacity(lam, r, stats)
    assert cap.shape == lam.shape
    assert cap.min() >= 0.0


def test_iba_attribution_range_and_shape():
    lam = RngStream(5).uniform((16, 8, 8), 0.05, 0.95)
    out = fb.iba_attribution(lam, (1, 16, 16))
    assert out.shape == (16, 16)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_bilinear_resize_identity_and_constant():
    img = RngStream(5).uniform((8, 8))
    same = fb.bilinear_resize(img, 8, 8)
    assert np.array_equal(same, img)
    const = fb.bilinear_resize(np.full((4, 4), 0.3), 16, 16)
    assert np.allclose(const, 0.3)
