"""Attribution evaluation protocols: Sensitivity-N, Insertion/Deletion,
remove-and-retrain, effective heat ratio, SSIM-based randomization sanity
check, plus the in-scope comparison attributors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .attribmap import AttributionMap, normalize_map
from .numcore import RngStream, Tensor
from .synthdata import UNK_ID, blur_image


class UndefinedCorrelation(ValueError):
    """Zero variance on one side of a correlation."""


@dataclass
class Curve:
    xs: list
    ys: list
    label: str = ""

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise ValueError("curve xs must be strictly increasing")


@dataclass
class EvalReport:
    experiment_id: str
    config: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)   # method -> {name: {mean, stderr, n}}
    curves: dict = field(default_factory=dict)    # method -> {name: Curve}

    def add_scalar(self, method, name, per_sample_values):
        vals = np.asarray(per_sample_values, dtype=np.float64)
        entry = {"mean": float(vals.mean()),
                 "stderr": float(vals.std(ddof=0) / np.sqrt(len(vals))),
                 "n": int(len(vals))}
        self.scalars.setdefault(method, {})[name] = entry
        return entry

    def to_dict(self):
        return {"report_version": 1,
                "experiment_id": self.experiment_id,
                "config": self.config,
                "scalars": self.scalars,
                "curves": {m: {k: {"xs": c.xs, "ys": c.ys, "label": c.label}
                               for k, c in cs.items()}
                           for m, cs in self.curves.items()}}


# ---------------------------------------------------------------------------
# scalar kernels


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson: need two equal-length vectors of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if denom == 0:
        raise UndefinedCorrelation("zero variance input")
    return float(np.clip(np.sum(xc * yc) / denom, -1.0, 1.0))


def auc_trapezoid(curve):
    xs = np.asarray(curve.xs, dtype=np.float64)
    ys = np.asarray(curve.ys, dtype=np.float64)
    if xs.size < 2:
        raise ValueError("auc: need at least 2 points")
    return float(np.trapezoid(ys, xs))


# ---------------------------------------------------------------------------
# Sensitivity-N


def sensitivity_n(score_fn, input_, map_values, n_values, k_sets=200,
                  stream=None, on_degenerate="error"):
    """PCC between attribution sums over random masks of size n and the
    induced drop in the target score, for each n.

    score_fn: maps a raw input batch to the per-sample target score.
    Masked elements are set to 0.
    """
    stream = stream or RngStream(0)
    arr = np.asarray(input_, dtype=np.float64)
    flat_map = np.asarray(map_values, dtype=np.float64).reshape(-1)
    total = arr.size
    base = float(score_fn(arr[None])[0])
    ys = []
    for n in n_values:
        if n > total:
            raise ValueError(f"n={n} exceeds element count {total}")
        batch = np.repeat(arr.reshape(1, -1), k_sets, axis=0)
        sums = np.empty(k_sets)
        for k in range(k_sets):
            idx = stream.choice(total, size=n, replace=False)
            batch[k, idx] = 0.0
            sums[k] = flat_map[idx].sum()
        scores = score_fn(batch.reshape((k_sets,) + arr.shape))
        changes = base - np.asarray(scores)
        try:
            ys.append(pearson(sums, changes))
        except UndefinedCorrelation:
            if on_degenerate == "error":
                raise
            ys.append(0.0)
    return Curve(list(n_values), ys, label="sensitivity-n")


def sensitivity_pct(score_fn, sequence, map_values, pct_values, k_sets=200,
                    stream=None, on_degenerate="zero"):
    """Percentage variant for token sequences: perturbed tokens become the
    unknown token. Degenerate correlations default to 0."""
    stream = stream or RngStream(0)
    seq = np.asarray(sequence)
    length = seq.shape[-1]
    flat_map = np.asarray(map_values, dtype=np.float64).reshape(-1)
    base = float(score_fn(seq[None])[0])
    ys = []
    for pct in pct_values:
        n = int(np.ceil(pct * length))
        n = min(n, length)
        batch = np.repeat(seq.reshape(1, -1), k_sets, axis=0)
        sums = np.empty(k_sets)
        for k in range(k_sets):
            if n > 0:
                idx = stream.choice(length, size=n, replace=False)
                batch[k, idx] = UNK_ID
                sums[k] = flat_map[idx].sum()
            else:
                sums[k] = 0.0
        scores = score_fn(batch)
        changes = base - np.asarray(scores)
        try:
            ys.append(pearson(sums, changes))
        except UndefinedCorrelation:
            if on_degenerate == "error":
                raise
            ys.append(0.0)
    return Curve(list(pct_values), ys, label="sensitivity-pct")


# ---------------------------------------------------------------------------
# Insertion / Deletion


def _attribution_order(map_values):
    # descending by score, ties broken by ascending element index
    flat = np.asarray(map_values, dtype=np.float64).reshape(-1)
    return np.lexsort((np.arange(flat.size), -flat))


def insertion_deletion(prob_fn, input_, map_values, batch=10,
                       baseline_kind="blur"):
    """Deletion: zero the next `batch` highest-attribution elements per step.
    Insertion: restore them into a baseline input. Curves track the target
    class probability over the fraction of elements perturbed.

    baseline_kind: "blur" (images), "unk" (token sequences), or "zero".
    Returns (insertion Curve, insertion AUC, deletion Curve, deletion AUC).
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    arr = np.asarray(input_)
    total = arr.size
    order = _attribution_order(map_values)

    if baseline_kind == "blur":
        baseline = blur_image(arr.astype(np.float64))
    elif baseline_kind == "unk":
        baseline = np.full(arr.shape, UNK_ID, dtype=arr.dtype)
    elif baseline_kind == "zero":
        baseline = np.zeros_like(arr)
    else:
        raise ValueError(f"unknown baseline {baseline_kind!r}")

    steps = [order[i:i + batch] for i in range(0, total, batch)]

    def run(start, fill_from):
        states = [start.copy().reshape(-1)]
        cur = states[0].copy()
        for idx in steps:
            cur = cur.copy()
            cur[idx] = fill_from.reshape(-1)[idx]
            states.append(cur)
        stacked = np.stack(states).reshape((-1,) + arr.shape)
        probs = prob_fn(stacked)
        fractions = [0.0] + [min((i + 1) * batch, total) / total
                             for i in range(len(steps))]
        return Curve(fractions, [float(p) for p in probs])

    deletion = run(arr.astype(np.float64) if baseline_kind != "unk" else arr,
                   np.zeros_like(arr) if baseline_kind != "unk" else baseline)
    insertion = run(baseline, arr)
    deletion.label, insertion.label = "deletion", "insertion"
    return insertion, auc_trapezoid(insertion), deletion, auc_trapezoid(deletion)


# ---------------------------------------------------------------------------
# remove and retrain


def roar(dataset, maps_by_split, rates, train_cfg=None, seed=900):
    """Retrain-from-scratch accuracy after replacing each image's top-rate
    pixels (by its own map) with the training-set mean pixel value."""
    from . import models as md
    from .synthdata import Dataset, PatchImageSet

    cfg = dict(epochs=30, lr=1e-3, batch_size=8)
    cfg.update(train_cfg or {})
    fill = float(dataset["train"].images.mean())
    xs, ys = [], []
    for rate_i, rate in enumerate(rates):
        perturbed = Dataset("image")
        for split in ("train", "val", "test"):
            s = dataset[split]
            maps = np.asarray(maps_by_split[split], dtype=np.float64)
            images = s.images.copy()
            k = int(round(rate * images[0].size))
            for i in range(images.shape[0]):
                if k > 0:
                    idx = _attribution_order(maps[i])[:k]
                    images[i].reshape(-1)[idx] = fill
            perturbed.splits[split] = PatchImageSet(images, s.labels, s.bboxes, split)
        model = md.SmallCnn(seed=seed + rate_i)
        md.train_classifier(model, perturbed, epochs=cfg["epochs"], lr=cfg["lr"],
                            seed=seed + 100 + rate_i, batch_size=cfg["batch_size"])
        xs.append(float(rate))
        ys.append(md.accuracy(model, perturbed["test"]))
    return Curve(xs, ys, label="roar")


# ---------------------------------------------------------------------------
# localization metrics


def ehr(map_values, bbox, n_thresholds=101):
    """Effective heat ratio: AUC over evenly spaced thresholds of the in-box
    attribution mass among above-threshold pixels divided by the count of
    above-threshold pixels (0 when none)."""
    values = np.asarray(map_values, dtype=np.float64)
    if (bbox.top + bbox.height > values.shape[0]
            or bbox.left + bbox.width > values.shape[1]):
        raise ValueError("bbox outside map")
    inside = bbox.mask(values.shape)
    taus = np.linspace(0.0, 1.0, n_thresholds)
    ratios = np.empty(n_thresholds)
    for i, tau in enumerate(taus):
        above = values >= tau
        count = int(above.sum())
        ratios[i] = values[above & inside].sum() / count if count else 0.0
    return float(np.trapezoid(ratios, taus))


def bbox_ratio(map_values, bbox, n=None):
    """Fraction of the top-n scored elements inside the box (stable ties)."""
    values = np.asarray(map_values, dtype=np.float64)
    if n is None:
        n = bbox.height * bbox.width
    if n < 1 or n > values.size:
        raise ValueError("n out of range")
    inside = bbox.mask(values.shape).reshape(-1)
    top = _attribution_order(values)[:n]
    return float(inside[top].mean())


# ---------------------------------------------------------------------------
# SSIM and the randomization sanity check

_SSIM_K1, _SSIM_K2 = 0.01, 0.03
_SSIM_WINDOW, _SSIM_SIGMA = 11, 1.5


def _ssim_window():
    half = _SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    w1 = np.exp(-0.5 * (xs / _SSIM_SIGMA) ** 2)
    w = np.outer(w1, w1)
    return w / w.sum()


def ssim(a, b, dynamic_range=1.0):
    """Mean windowed structural similarity (11x11 Gaussian window, valid
    positions only); symmetric, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ssim: need two equal-shape 2-D maps")
    w = _ssim_window()
    c1 = (_SSIM_K1 * dynamic_range) ** 2
    c2 = (_SSIM_K2 * dynamic_range) ** 2

    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ValueError("ssim: map smaller than the window")
    mu_x = _filter2(a, w)
    mu_y = _filter2(b, w)
    var_x = _filter2(a * a, w) - mu_x * mu_x
    var_y = _filter2(b * b, w) - mu_y * mu_y
    cov = _filter2(a * b, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def _filter2(x, w):
    k = w.shape[0]
    h, wd = x.shape
    out = np.zeros((h - k + 1, wd - k + 1))
    for i in range(k):
        for j in range(k):
            out += w[i, j] * x[i:i + h - k + 1, j:j + wd - k + 1]
    return out


def sanity_check(model, attributor, inputs, targets, seed=0):
    """SSIM between original attributions and attributions from models with
    progressively randomized layers (from the last layer backward).

    attributor: callable(model, input, target) -> 2-D map values.
    Returns (Curve of mean SSIM vs depth, per-depth std list).
    """
    from .models import randomize_from_layer

    originals = [np.asarray(attributor(model, x, t))
                 for x, t in zip(inputs, targets)]
    layer_order = list(reversed(model.layer_ids))
    depths = list(range(len(layer_order) + 1))
    means, stds = [], []
    for depth in depths:
        if depth == 0:
            current = model
        else:
            current = randomize_from_layer(model, layer_order[depth - 1],
                                           seed=seed + depth)
        sims = [ssim(orig, np.asarray(attributor(current, x, t)))
                for orig, (x, t) in zip(originals, zip(inputs, targets))]
        means.append(float(np.mean(sims)))
        stds.append(float(np.std(sims)))
    return Curve(depths, means, label="sanity-ssim"), stds


# ---------------------------------------------------------------------------
# comparison attributors


def integrated_gradients(forward_fn, input_, target, steps=50, baseline=None,
                         signed=False):
    """Path-integrated gradients of the target logit from a baseline.

    forward_fn: maps an input-shaped Tensor batch to a logits Tensor.
    Returns (normalized map over |raw|, raw attribution tensor).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    arr = np.asarray(input_, dtype=np.float64)
    base = np.zeros_like(arr) if baseline is None else np.asarray(baseline, dtype=np.float64)
    alphas = (np.arange(1, steps + 1) / steps).reshape((-1,) + (1,) * arr.ndim)
    points = base[None] + alphas * (arr - base)[None]
    leaf = Tensor(points, requires_grad=True)
    logits = forward_fn(leaf)
    onehot = np.zeros(logits.data.shape)
    onehot[:, target] = 1.0
    nc.backward(nc.tsum(nc.mul(logits, Tensor(onehot))))
    raw = (arr - base) * leaf.grad.mean(axis=0)
    values = raw if signed else np.abs(raw)
    return normalize_map(values), raw


def random_attribution(shape, stream):
    """Uniform-[0,1] attribution baseline."""
    return AttributionMap(normalize_map(stream.uniform(shape)),
                          {"method": "random"})
