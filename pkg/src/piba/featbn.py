"""Feature-level information bottleneck: noise injection at a hidden layer,
mask optimization, and the interpolated hidden-layer attribution baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import NumericError, Tensor

SIGMA_FLOOR = 1e-5


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray  # elementwise, clamped at SIGMA_FLOOR


@dataclass
class FeatureBnConfig:
    beta: float = 10.0
    steps: int = 10
    lr: float = 1.0
    noise_draws: int = 10
    alpha_init: float = 5.0  # mask starts open, lambda ~ 0.993


def estimate_feature_stats(model, layer_id, samples):
    """Elementwise mean / unbiased std of the named layer over a batch."""
    from .models import feature_activations

    acts = feature_activations(model, layer_id, samples)
    if acts.shape[0] < 2:
        raise ValueError("need at least 2 samples for feature statistics")
    mu = np.mean(acts, axis=0)
    sigma = np.maximum(np.std(acts, axis=0, ddof=1), SIGMA_FLOOR)
    return FeatureStats(mu, sigma)


def bottleneck_kl(mask, value, prior_mask, mu, sigma):
    """Per-element KL between the masked-value distribution given the value
    and its prior-masked marginal.

    KL_k = log((1-p*l)/(1-l)) + (1-l)^2 / (2(1-p*l)^2)
         + (v-mu)^2 (l - p*l)^2 / (2(1-p*l)^2 sigma^2) - 1/2

    With prior_mask = 0 this reduces to the plain Gaussian feature-level KL.
    Accepts Tensors (differentiable) or arrays; returns the same flavor.
    """
    tensor_in = any(isinstance(t, Tensor) for t in (mask, prior_mask))
    lam = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float64))
    if np.any(lam.data >= 1.0) or np.any(lam.data < 0.0):
        raise NumericError("bottleneck_kl: mask must lie in [0, 1)")
    prior = prior_mask if isinstance(prior_mask, Tensor) else Tensor(
        np.broadcast_to(np.asarray(prior_mask, dtype=np.float64), lam.data.shape).copy())
    if np.any(prior.data > 1.0) or np.any(prior.data < 0.0):
        raise NumericError("bottleneck_kl: prior mask must lie in [0, 1]")
    value = np.broadcast_to(np.asarray(value, dtype=np.float64), lam.data.shape)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), lam.data.shape)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), lam.data.shape)

    pl = nc.mul(prior, lam)
    one_minus_pl = nc.sub(1.0, pl)
    one_minus_l = nc.sub(1.0, lam)
    log_term = nc.sub(nc.log(one_minus_pl), nc.log(one_minus_l))
    denom = nc.mul(2.0, nc.mul(one_minus_pl, one_minus_pl))
    var_term = nc.div(nc.mul(one_minus_l, one_minus_l), denom)
    scaled = Tensor(((value - mu) / sigma) ** 2)
    shift = nc.sub(lam, pl)
    mean_term = nc.div(nc.mul(scaled, nc.mul(shift, shift)), denom)
    kl = nc.add(nc.sub(nc.add(log_term, var_term), 0.5), mean_term)
    return kl if tensor_in else kl.data


def fit_feature_bottleneck(model, layer_id, input_, target, stats, cfg=None,
                           stream=None):
    """Optimize the feature mask for one input; returns (lambda*, sampler, losses).

    The sampler draws Z* = lambda* R + (1 - lambda*) eps from a given stream.
    """
    from .numcore import RngStream

    cfg = cfg or FeatureBnConfig()
    stream = stream or RngStream(0)
    from .models import feature_activations

    r = feature_activations(model, layer_id, _batch_of_one(model, input_))[0]
    alpha = Tensor(np.full(r.shape, cfg.alpha_init), requires_grad=True)
    opt = nc.OptimState("adam", [alpha], lr=cfg.lr)
    losses = []
    for step in range(cfg.steps):
        nc.zero_grads([alpha])
        loss = _feature_loss(model, layer_id, r, target, stats, alpha, cfg,
                             stream.child(step))
        if not np.isfinite(loss.data):
            raise NumericError("feature bottleneck: non-finite loss")
        losses.append(float(loss.data))
        nc.backward(loss)
        opt.step()
    lam_star = _sigmoid_np(alpha.data)

    def sampler(sample_stream, n=1):
        eps = stats.mu + stats.sigma * sample_stream.normal((n,) + r.shape)
        return lam_star * r + (1.0 - lam_star) * eps

    return lam_star, sampler, losses


def _feature_loss(model, layer_id, r, target, stats, alpha, cfg, stream):
    draws = cfg.noise_draws
    lam = nc.sigmoid(alpha)
    lam_b = nc.repeat0(lam, draws)
    eps = Tensor(stats.mu + stats.sigma * stream.normal((draws,) + r.shape))
    r_b = Tensor(np.broadcast_to(r, (draws,) + r.shape).copy())
    z = nc.add(nc.mul(lam_b, r_b), nc.mul(nc.sub(1.0, lam_b), eps))
    logits = model.head_from(layer_id, z)
    ce = nc.softmax_cross_entropy(logits, np.full(draws, target, dtype=np.int64))
    kl = bottleneck_kl(lam, r, 0.0, stats.mu, stats.sigma)
    return nc.add(ce, nc.mul(cfg.beta, nc.tmean(kl)))


def feature_capacity(lam_star, r, stats):
    """Per-element information capacity of the fitted mask (nats)."""
    return np.maximum(bottleneck_kl(lam_star, r, 0.0, stats.mu, stats.sigma), 0.0)


def iba_attribution(lam_star, input_shape, capacity=None):
    """Hidden-layer attribution baseline: channel-mean of lambda* (weighted by
    per-element capacity when provided), bilinearly resized to the input grid
    and min-max normalized."""
    from .attribmap import normalize_map

    weighted = lam_star * capacity if capacity is not None else lam_star
    if weighted.ndim == 3:  # (C,H,W)
        spatial = weighted.mean(axis=0)
    elif weighted.ndim == 2:
        spatial = weighted
    else:
        raise ValueError(f"unsupported feature rank {weighted.ndim}")
    resized = bilinear_resize(spatial, input_shape[-2], input_shape[-1])
    return normalize_map(resized)


def bilinear_resize(img, out_h, out_w):
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x0 + 1)]
    c = img[np.ix_(y0 + 1, x0)]
    d = img[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def _batch_of_one(model, input_):
    arr = np.asarray(input_)
    if model.kind == "cnn":
        return arr[None] if arr.ndim == 3 else arr
    return arr[None] if arr.ndim == 1 else arr
