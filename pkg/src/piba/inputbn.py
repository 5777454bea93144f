"""Input-level bottleneck: adversarial estimation of the input prior mask,
then optimization of the final input mask against the closed-form KL."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .attribmap import AttributionMap, normalize_map
from .featbn import (FeatureBnConfig, SIGMA_FLOOR, bottleneck_kl,
                     estimate_feature_stats, fit_feature_bottleneck)
from .numcore import NumericError, RngStream, Tensor


@dataclass
class GanConfig:
    epochs: int = 20
    mask_lr: float = 1e-2    # prior-mask logits (lambda_G)
    noise_lr: float = 5e-5   # generator noise parameters (mu_G, sigma_G)
    critic_lr: float = 5e-5
    gen_batch: int = 16
    bank_size: int = 200
    critic_every: int = 5    # one critic update per this many generator updates
    warmup: int = 200        # critic-only updates before the first epoch
    clip: float = 0.01
    jitter: float = 0.05     # local-set jitter, in units of std(input)


@dataclass
class InputBnConfig:
    beta: float = 20.0
    steps: int = 60
    lr: float = 0.5
    noise_draws: int = 10
    alpha_init: float = 5.0


@dataclass
class InputIbaConfig:
    feature: FeatureBnConfig = field(default_factory=FeatureBnConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    input: InputBnConfig = field(default_factory=InputBnConfig)
    stat_samples: int = 64


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


# ---------------------------------------------------------------------------
# sampling


def sample_local_inputs(input_, n, stream, jitter=0.05, clamp=None):
    """n Gaussian-jittered copies of the input (the local explanation set)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    arr = np.asarray(input_, dtype=np.float64)
    sigma = jitter * arr.std()
    out = arr[None] + sigma * stream.normal((n,) + arr.shape)
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


def sample_target_bank(model, layer_id, input_, lam_star, stats, n=200,
                       stream=None):
    """n draws of Z* = lambda* R + (1 - lambda*) eps, fresh noise per draw."""
    from .models import feature_activations

    stream = stream or RngStream(0)
    from .featbn import _batch_of_one

    r = feature_activations(model, layer_id, _batch_of_one(model, input_))[0]
    eps = stats.mu + stats.sigma * stream.normal((n,) + r.shape)
    return lam_star * r[None] + (1.0 - lam_star) * eps


# ---------------------------------------------------------------------------
# critics


def _clip_uniform(stream, shape, clip):
    return stream.uniform(shape, -clip, clip)


class ConvCritic:
    """3 conv layers, then 2 fully connected layers; scalar score per sample."""

    def __init__(self, in_channels, hw, stream, clip=0.01):
        self.clip = clip
        c = in_channels
        self.params = {
            "c1_w": Tensor(_clip_uniform(stream, (8, c, 3, 3), clip), requires_grad=True),
            "c1_b": Tensor(np.zeros(8), requires_grad=True),
            "c2_w": Tensor(_clip_uniform(stream, (8, 8, 3, 3), clip), requires_grad=True),
            "c2_b": Tensor(np.zeros(8), requires_grad=True),
            "c3_w": Tensor(_clip_uniform(stream, (4, 8, 3, 3), clip), requires_grad=True),
            "c3_b": Tensor(np.zeros(4), requires_grad=True),
            "f1_w": Tensor(_clip_uniform(stream, (4 * hw[0] * hw[1], 16), clip), requires_grad=True),
            "f1_b": Tensor(np.zeros(16), requires_grad=True),
            "f2_w": Tensor(_clip_uniform(stream, (16, 1), clip), requires_grad=True),
            "f2_b": Tensor(np.zeros(1), requires_grad=True),
        }

    def parameters(self):
        return list(self.params.values())

    def score(self, x):
        """x: (N,C,H,W) Tensor -> (N,1) critic scores."""
        p = self.params
        n = x.data.shape[0]
        h = nc.relu(nc.add_bias(nc.conv2d(x, p["c1_w"]), p["c1_b"]))
        h = nc.relu(nc.add_bias(nc.conv2d(h, p["c2_w"]), p["c2_b"]))
        h = nc.relu(nc.add_bias(nc.conv2d(h, p["c3_w"]), p["c3_b"]))
        flat = nc.reshape(h, (n, h.data.shape[1] * h.data.shape[2] * h.data.shape[3]))
        h = nc.relu(nc.add_bias(nc.matmul(flat, p["f1_w"]), p["f1_b"]))
        return nc.add_bias(nc.matmul(h, p["f2_w"]), p["f2_b"])

    def clamp_weights(self):
        for p in self.parameters():
            np.clip(p.data, -self.clip, self.clip, out=p.data)


class RnnCritic:
    """One recurrent layer over (N,L,D) feature sequences, then a linear head."""

    hidden = 16

    def __init__(self, in_dim, stream, clip=0.01):
        self.clip = clip
        h = self.hidden
        self.params = {}
        for gate in ("z", "r", "h"):
            self.params[f"w{gate}"] = Tensor(_clip_uniform(stream, (in_dim, h), clip), requires_grad=True)
            self.params[f"u{gate}"] = Tensor(_clip_uniform(stream, (h, h), clip), requires_grad=True)
            self.params[f"b{gate}"] = Tensor(np.zeros(h), requires_grad=True)
        self.params["out_w"] = Tensor(_clip_uniform(stream, (h, 1), clip), requires_grad=True)
        self.params["out_b"] = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self):
        return list(self.params.values())

    def score(self, x):
        from .models import _slice_time

        n, length, _ = x.data.shape
        h = Tensor(np.zeros((n, self.hidden)))
        gp = {k: self.params[k] for k in
              ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")}
        for t in range(length):
            h = nc.gru_step(_slice_time(x, t), h, gp)
        return nc.add_bias(nc.matmul(h, self.params["out_w"]), self.params["out_b"])

    def clamp_weights(self):
        for p in self.parameters():
            np.clip(p.data, -self.clip, self.clip, out=p.data)


def make_critic(feature_shape, stream, clip=0.01):
    if len(feature_shape) == 3:
        return ConvCritic(feature_shape[0], feature_shape[1:], stream, clip)
    if len(feature_shape) == 2:
        return RnnCritic(feature_shape[1], stream, clip)
    raise ValueError(f"no critic for feature shape {feature_shape}")


# ---------------------------------------------------------------------------
# generative estimator of the input prior mask


@dataclass
class GenEstimator:
    lam: np.ndarray     # input-shaped prior mask in (0,1)
    mu: np.ndarray      # learned noise mean
    sigma: np.ndarray   # learned noise std (>= 0)
    critic_trace: list  # per-epoch Wasserstein estimates

    def sample_noise(self, stream, n):
        return self.mu + self.sigma * stream.normal((n,) + self.mu.shape)


def fit_gen_estimator(prefix_fn, input_, target_bank, cfg=None, stream=None,
                      clamp=None, critic=None):
    """Adversarially fit (lambda_G, mu_G, sigma_G) so that masked local inputs
    pushed through `prefix_fn` match the target feature bank.

    prefix_fn maps an input-shaped Tensor batch to a feature-shaped Tensor
    batch. Both players use RMSProp; the critic first gets cfg.warmup
    updates on the initial generator, then one update every cfg.critic_every
    generator updates, weight-clipped after each update.
    """
    cfg = cfg or GanConfig()
    stream = stream or RngStream(0)
    bank = np.asarray(target_bank, dtype=np.float64)
    if bank.shape[0] == 0:
        raise ValueError("empty target bank")
    arr = np.asarray(input_, dtype=np.float64)

    alpha = Tensor(np.zeros(arr.shape), requires_grad=True)  # lambda_G = 0.5
    mu = Tensor(np.full(arr.shape, arr.mean()), requires_grad=True)
    sig_raw = Tensor(np.full(arr.shape, _softplus_inv(max(arr.std(), 0.1))),
                     requires_grad=True)
    gen_params = [alpha, mu, sig_raw]
    mask_opt = nc.OptimState("rmsprop", [alpha], lr=cfg.mask_lr)
    noise_opt = nc.OptimState("rmsprop", [mu, sig_raw], lr=cfg.noise_lr)

    if critic is None:
        critic = make_critic(bank.shape[1:], stream.child(1), cfg.clip)
    critic_opt = nc.OptimState("rmsprop", critic.parameters(), lr=cfg.critic_lr)

    jitter_stream = stream.child(2)
    noise_stream = stream.child(3)
    bank_stream = stream.child(4)

    def critic_step(real):
        nc.zero_grads(critic.parameters())
        fake_vals = _gen_forward(prefix_fn, arr, alpha, mu, sig_raw,
                                 real.shape[0], jitter_stream, noise_stream,
                                 cfg.jitter, clamp).data
        closs = nc.sub(nc.tmean(critic.score(Tensor(fake_vals))),
                       nc.tmean(critic.score(Tensor(real))))
        if not np.isfinite(closs.data):
            raise NumericError("critic: non-finite loss")
        nc.backward(closs)
        critic_opt.step()
        critic.clamp_weights()

    # critic warm-up on the initial generator
    warm_order = bank_stream.permutation(bank.shape[0])
    for k in range(cfg.warmup):
        i = (k * cfg.gen_batch) % bank.shape[0]
        critic_step(bank[warm_order[i:i + cfg.gen_batch]])

    trace = []
    gen_updates = 0
    for epoch in range(cfg.epochs):
        order = bank_stream.permutation(bank.shape[0])
        for i in range(0, bank.shape[0], cfg.gen_batch):
            real = bank[order[i:i + cfg.gen_batch]]
            nb = real.shape[0]

            # generator step
            nc.zero_grads(gen_params)
            fake = _gen_forward(prefix_fn, arr, alpha, mu, sig_raw, nb,
                                jitter_stream, noise_stream, cfg.jitter, clamp)
            gen_loss = nc.mul(-1.0, nc.tmean(critic.score(fake)))
            if not np.isfinite(gen_loss.data):
                raise NumericError("generator: non-finite loss")
            nc.backward(gen_loss)
            mask_opt.step()
            noise_opt.step()
            gen_updates += 1

            # critic step, once per cfg.critic_every generator updates
            if gen_updates % cfg.critic_every == 0:
                critic_step(real)
        trace.append(_wasserstein_estimate(critic, prefix_fn, arr, alpha, mu,
                                           sig_raw, bank, jitter_stream,
                                           noise_stream, cfg, clamp))
    return GenEstimator(_sigmoid_np(alpha.data), mu.data.copy(),
                        _softplus_np(sig_raw.data), trace)


def _gen_forward(prefix_fn, arr, alpha, mu, sig_raw, n, jitter_stream,
                 noise_stream, jitter, clamp):
    locals_ = sample_local_inputs(arr, n, jitter_stream, jitter, clamp)
    lam = nc.repeat0(nc.sigmoid(alpha), n)
    sigma = nc.repeat0(nc.softplus(sig_raw), n)
    mu_b = nc.repeat0(mu, n)
    eps = nc.gaussian(noise_stream, mu_b, sigma)
    z_g = nc.add(nc.mul(lam, Tensor(locals_)), nc.mul(nc.sub(1.0, lam), eps))
    return prefix_fn(z_g)


def _wasserstein_estimate(critic, prefix_fn, arr, alpha, mu, sig_raw, bank,
                          jitter_stream, noise_stream, cfg, clamp):
    fake = _gen_forward(prefix_fn, arr, alpha, mu, sig_raw, min(len(bank), 64),
                        jitter_stream, noise_stream, cfg.jitter, clamp).data
    real_score = critic.score(Tensor(bank[:64])).data.mean()
    fake_score = critic.score(Tensor(fake)).data.mean()
    return abs(float(real_score - fake_score))


# ---------------------------------------------------------------------------
# final input bottleneck


def fit_input_bottleneck(forward_fn, input_, target, gen, input_stats,
                         cfg=None, stream=None):
    """Optimize the final input mask against cross-entropy plus the
    closed-form KL with the adversarial prior mask.

    The likelihood term samples the conditional Z_I | I = Lambda I +
    (1 - Lambda) eps with eps ~ N(mu_I, sigma_I). The adversarial prior
    enters only through the KL between that conditional and the
    Z_G-conditioned marginal N(lam_G Lambda I + (1 - lam_G Lambda) mu_I,
    (1 - lam_G Lambda)^2 sigma_I^2).

    forward_fn maps an input-shaped Tensor batch to logits. Returns
    (Lambda*, losses).
    """
    cfg = cfg or InputBnConfig()
    stream = stream or RngStream(0)
    arr = np.asarray(input_, dtype=np.float64)
    mu_i, sigma_i = input_stats
    mu_i = np.broadcast_to(np.asarray(mu_i, dtype=np.float64), arr.shape)
    sigma_i = np.maximum(np.broadcast_to(np.asarray(sigma_i, dtype=np.float64),
                                         arr.shape), SIGMA_FLOOR)

    alpha = Tensor(np.full(arr.shape, cfg.alpha_init), requires_grad=True)
    opt = nc.OptimState("adam", [alpha], lr=cfg.lr)
    draws = cfg.noise_draws
    losses = []
    for step in range(cfg.steps):
        sub = stream.child(step)
        nc.zero_grads([alpha])
        lam = nc.sigmoid(alpha)
        lam_b = nc.repeat0(lam, draws)
        eps = mu_i + sigma_i * sub.child(1).normal((draws,) + arr.shape)
        base = np.repeat(arr[None], draws, axis=0)
        z_i = nc.add(nc.mul(lam_b, Tensor(base)),
                     nc.mul(nc.sub(1.0, lam_b), Tensor(eps)))
        logits = forward_fn(z_i)
        ce = nc.softmax_cross_entropy(logits, np.full(draws, target, dtype=np.int64))
        kl = bottleneck_kl(lam, arr, gen.lam, mu_i, sigma_i)
        loss = nc.add(ce, nc.mul(cfg.beta, nc.tmean(kl)))
        if not np.isfinite(loss.data):
            raise NumericError("input bottleneck: non-finite loss")
        losses.append(float(loss.data))
        nc.backward(loss)
        opt.step()
    return _sigmoid_np(alpha.data), losses


# ---------------------------------------------------------------------------
# full pipeline


def input_iba(model, layer_id, input_, target, train_inputs, cfg=None,
              seed=0):
    """Full input-level bottleneck attribution for one input.

    train_inputs: raw training inputs used for feature and input statistics.
    Returns an AttributionMap over the input spatial shape (per-pixel for
    images, per-token for sequences).
    """
    is_rnn = model.kind == "rnn"
    if cfg is None:
        cfg = InputIbaConfig()
        if is_rnn:
            # the recurrent critic gives the mask logits much larger
            # gradients than the conv critic; the fast image default
            # overshoots and inverts the prior on sequences
            cfg.gan = GanConfig(mask_lr=cfg.gan.noise_lr)
    root = RngStream(seed, stream=31)
    if is_rnn:
        arr = model.embed(np.asarray(input_)[None]).data[0]
        train_arr = model.embed(np.asarray(train_inputs[:cfg.stat_samples])).data
        clamp = None
    else:
        arr = np.asarray(input_, dtype=np.float64)
        train_arr = np.asarray(train_inputs[:cfg.stat_samples], dtype=np.float64)
        clamp = (0.0, 1.0)

    try:
        stats = estimate_feature_stats(model, layer_id,
                                       train_inputs[:cfg.stat_samples])
    except Exception as e:
        raise StageError("feature-stats", e) from e

    try:
        lam_star, _, _ = fit_feature_bottleneck(
            model, layer_id, input_, target, stats, cfg.feature, root.child(0))
    except Exception as e:
        raise StageError("feature-bottleneck", e) from e

    try:
        bank = sample_target_bank(model, layer_id, input_, lam_star, stats,
                                  cfg.gan.bank_size, root.child(1))
    except Exception as e:
        raise StageError("target-bank", e) from e

    def prefix_fn(t):
        return model.prefix_to(layer_id, t)

    try:
        gen = fit_gen_estimator(prefix_fn, arr, bank, cfg.gan, root.child(2),
                                clamp=clamp)
    except Exception as e:
        raise StageError("gen-estimator", e) from e

    input_stats = (train_arr.mean(axis=0), train_arr.std(axis=0, ddof=1))
    if is_rnn:
        def forward_fn(t):
            return model.head_from("embed", t)
    else:
        def forward_fn(t):
            return model.forward(t)["logits"]

    try:
        lam_final, _ = fit_input_bottleneck(forward_fn, arr, target, gen,
                                            input_stats, cfg.input,
                                            root.child(3))
    except Exception as e:
        raise StageError("input-bottleneck", e) from e

    if is_rnn:
        values = lam_final.mean(axis=-1)          # per-token
    else:
        values = lam_final.mean(axis=0)           # channel mean -> (H,W)
    return AttributionMap(normalize_map(values),
                          {"method": "inputiba", "seed": seed,
                           "layer": layer_id, "target": int(target)})


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return float(np.log(np.expm1(y))) if y < 30 else float(y)
