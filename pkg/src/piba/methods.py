"""Attribution method dispatch shared by the CLI and the evaluation runs."""

from __future__ import annotations

import numpy as np

from . import evalsuite as ev
from . import featbn as fb
from . import inputbn as ib
from . import models as md
from .attribmap import AttributionMap, normalize_map
from .numcore import RngStream

METHODS = ("inputiba", "iba", "ig", "random")

FEATURE_LAYER = {"cnn": "conv2", "rnn": "rnn"}


def attribute_one(model, dataset, split, index, method, seed,
                  iba_cfg=None):
    """Compute one attribution map for dataset[split][index]."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    s = dataset[split]
    layer = FEATURE_LAYER[model.kind]
    if model.kind == "cnn":
        input_, target = s.images[index], int(s.labels[index])
        train_inputs = dataset["train"].images
        shape = input_.shape[-2:]
    else:
        input_, target = s.sequences[index], int(s.labels[index])
        train_inputs = dataset["train"].sequences
        shape = (input_.shape[-1],)

    if method == "inputiba":
        amap = ib.input_iba(model, layer, input_, target, train_inputs,
                            cfg=iba_cfg, seed=seed)
    elif method == "iba":
        stream = RngStream(seed, stream=41)
        stats = fb.estimate_feature_stats(model, layer, train_inputs[:64])
        lam, _, _ = fb.fit_feature_bottleneck(model, layer, input_, target,
                                              stats, stream=stream)
        r = md.feature_activations(model, layer,
                                   fb._batch_of_one(model, input_))[0]
        cap = fb.feature_capacity(lam, r, stats)
        if model.kind == "cnn":
            values = fb.iba_attribution(lam, (1,) + shape, capacity=cap)
        else:
            values = normalize_map((lam * cap).mean(axis=-1))
        amap = AttributionMap(values, {"method": "iba"})
    elif method == "ig":
        if model.kind == "cnn":
            def fwd(t):
                return model.forward(t)["logits"]
            _, raw = ev.integrated_gradients(fwd, input_, target)
            values = normalize_map(np.abs(raw).mean(axis=0))
        else:
            emb = model.embed(np.asarray(input_)[None]).data[0]

            def fwd(t):
                return model.head_from("embed", t)
            per_dim, _ = ev.integrated_gradients(fwd, emb, target)
            values = normalize_map(per_dim.mean(axis=-1))
        amap = AttributionMap(values, {"method": "ig"})
    else:
        amap = ev.random_attribution(shape, RngStream(seed, stream=97))

    amap.provenance.update({"method": method, "seed": int(seed),
                            "split": split, "index": int(index)})
    return amap


def target_prob_fn(model, target):
    """Batch -> target-class softmax probability."""
    from .numcore import softmax

    def fn(batch):
        return softmax(md.predict_logits(model, batch))[:, target]

    return fn


def target_logit_fn(model, target):
    def fn(batch):
        return md.predict_logits(model, batch)[:, target]

    return fn
