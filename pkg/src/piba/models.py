"""Small trainable classifiers with named layers, checkpoints, and
progressive parameter randomization."""

from __future__ import annotations

import struct
import zlib

import numpy as np

from . import numcore as nc
from .numcore import RngStream, Tensor
from .synthdata import FormatError, MagicMismatch, TruncatedPayload, VersionMismatch

CKPT_MAGIC = b"PIBC"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


def _layer_stream(seed, layer):
    # stable across processes, unlike hash()
    return RngStream(seed, stream=zlib.crc32(layer.encode()))


def _he_uniform(stream, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return stream.uniform(shape, -bound, bound)


def _plain_uniform(stream, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return stream.uniform(shape, -bound, bound)


class SmallCnn:
    """conv1(1->8) -> relu -> conv2(8->16) -> relu -> maxpool2 -> fc1 -> relu
    -> fc2 -> 3 logits, on 1x16x16 inputs."""

    kind = "cnn"
    layer_ids = ("conv1", "conv2", "fc1", "fc2")
    num_classes = 3

    def __init__(self, seed=0):
        self.params = {}
        for layer in self.layer_ids:
            self._init_layer(layer, _layer_stream(seed, layer))

    def _init_layer(self, layer, stream):
        if layer == "conv1":
            self.params["conv1_w"] = Tensor(_he_uniform(stream, (8, 1, 3, 3), 9), requires_grad=True)
            self.params["conv1_b"] = Tensor(np.zeros(8), requires_grad=True)
        elif layer == "conv2":
            self.params["conv2_w"] = Tensor(_he_uniform(stream, (16, 8, 3, 3), 72), requires_grad=True)
            self.params["conv2_b"] = Tensor(np.zeros(16), requires_grad=True)
        elif layer == "fc1":
            self.params["fc1_w"] = Tensor(_he_uniform(stream, (16 * 8 * 8, 32), 16 * 8 * 8), requires_grad=True)
            self.params["fc1_b"] = Tensor(np.zeros(32), requires_grad=True)
        elif layer == "fc2":
            self.params["fc2_w"] = Tensor(_he_uniform(stream, (32, 3), 32), requires_grad=True)
            self.params["fc2_b"] = Tensor(np.zeros(3), requires_grad=True)
        else:
            raise KeyError(f"unknown layer {layer!r}")

    def parameters(self):
        return list(self.params.values())

    def layer_params(self, layer):
        if layer not in self.layer_ids:
            raise KeyError(f"unknown layer {layer!r}")
        return {k: v for k, v in self.params.items() if k.startswith(layer + "_")}

    def forward(self, x):
        """Full forward pass; returns a dict of named post-activation nodes."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        p = self.params
        acts = {}
        acts["conv1"] = nc.relu(nc.add_bias(nc.conv2d(x, p["conv1_w"]), p["conv1_b"]))
        acts["conv2"] = nc.relu(nc.add_bias(nc.conv2d(acts["conv1"], p["conv2_w"]), p["conv2_b"]))
        acts["logits"] = self.head_from("conv2", acts["conv2"], acts)
        return acts

    def head_from(self, layer, t, acts=None):
        """Run the network from the post-activation tensor of `layer` to logits."""
        p = self.params
        if layer == "conv2":
            n = t.data.shape[0]
            pool = nc.maxpool2(t)
            flat = nc.reshape(pool, (n, 16 * 8 * 8))
            fc1 = nc.relu(nc.add_bias(nc.matmul(flat, p["fc1_w"]), p["fc1_b"]))
            logits = nc.add_bias(nc.matmul(fc1, p["fc2_w"]), p["fc2_b"])
            if acts is not None:
                acts["pool"], acts["fc1"] = pool, fc1
            return logits
        raise KeyError(f"head_from: unsupported layer {layer!r}")

    def prefix_to(self, layer, x):
        """Network prefix up to the post-activation tensor of `layer`."""
        if layer != "conv2":
            raise KeyError(f"prefix_to: unsupported layer {layer!r}")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        p = self.params
        h = nc.relu(nc.add_bias(nc.conv2d(x, p["conv1_w"]), p["conv1_b"]))
        return nc.relu(nc.add_bias(nc.conv2d(h, p["conv2_w"]), p["conv2_b"]))

    def input_batches(self, split_set):
        return split_set.images, split_set.labels


class SmallRnn:
    """embedding(64->16) -> GRU(hidden 32) -> final-state fc(32->2)."""

    kind = "rnn"
    layer_ids = ("embed", "rnn", "fc")
    num_classes = 2
    embed_dim = 16
    hidden = 32

    def __init__(self, seed=0):
        self.params = {}
        for layer in self.layer_ids:
            self._init_layer(layer, _layer_stream(seed, layer))

    def _init_layer(self, layer, stream):
        e, h = self.embed_dim, self.hidden
        if layer == "embed":
            self.params["embed_w"] = Tensor(_he_uniform(stream, (64, e), 64), requires_grad=True)
        elif layer == "rnn":
            for gate in ("z", "r", "h"):
                self.params[f"rnn_w{gate}"] = Tensor(_plain_uniform(stream, (e, h), e), requires_grad=True)
                self.params[f"rnn_u{gate}"] = Tensor(_plain_uniform(stream, (h, h), h), requires_grad=True)
                self.params[f"rnn_b{gate}"] = Tensor(np.zeros(h), requires_grad=True)
        elif layer == "fc":
            self.params["fc_w"] = Tensor(_he_uniform(stream, (h, 2), h), requires_grad=True)
            self.params["fc_b"] = Tensor(np.zeros(2), requires_grad=True)
        else:
            raise KeyError(f"unknown layer {layer!r}")

    def parameters(self):
        return list(self.params.values())

    def layer_params(self, layer):
        if layer not in self.layer_ids:
            raise KeyError(f"unknown layer {layer!r}")
        return {k: v for k, v in self.params.items() if k.startswith(layer + "_")}

    def _gru_params(self):
        p = self.params
        return {"wz": p["rnn_wz"], "uz": p["rnn_uz"], "bz": p["rnn_bz"],
                "wr": p["rnn_wr"], "ur": p["rnn_ur"], "br": p["rnn_br"],
                "wh": p["rnn_wh"], "uh": p["rnn_uh"], "bh": p["rnn_bh"]}

    def embed(self, ids):
        return nc.embedding(self.params["embed_w"], np.asarray(ids))

    def run_from_embeddings(self, emb):
        """GRU over an (N,L,E) embedded batch; returns (states (N,L,H), logits)."""
        n, length, e = emb.data.shape
        gp = self._gru_params()
        h = Tensor(np.zeros((n, self.hidden)))
        states = []
        for t in range(length):
            x_t = _slice_time(emb, t)
            h = nc.gru_step(x_t, h, gp)
            states.append(nc.reshape(h, (n, 1, self.hidden)))
        seq = nc.concat(states, axis=1)
        logits = nc.add_bias(nc.matmul(h, self.params["fc_w"]), self.params["fc_b"])
        return seq, logits

    def forward(self, ids):
        emb = self.embed(ids)
        seq, logits = self.run_from_embeddings(emb)
        return {"embed": emb, "rnn": seq, "logits": logits}

    def head_from(self, layer, t, acts=None):
        if layer == "rnn":
            n, length, h = t.data.shape
            last = _slice_time(t, length - 1)
            return nc.add_bias(nc.matmul(last, self.params["fc_w"]), self.params["fc_b"])
        if layer == "embed":
            _, logits = self.run_from_embeddings(t)
            return logits
        raise KeyError(f"head_from: unsupported layer {layer!r}")

    def prefix_to(self, layer, emb):
        """Prefix from embedded input to the post-activation of `layer`."""
        if layer != "rnn":
            raise KeyError(f"prefix_to: unsupported layer {layer!r}")
        seq, _ = self.run_from_embeddings(emb)
        return seq

    def input_batches(self, split_set):
        return split_set.sequences, split_set.labels


def _slice_time(t, idx):
    """Select time step idx from an (N,L,D) tensor -> (N,D)."""
    n, length, d = t.data.shape

    def vjp(g):
        gt = np.zeros((n, length, d))
        gt[:, idx, :] = g
        return (gt,)

    return nc._node(t.data[:, idx, :], (t,), vjp)


# ---------------------------------------------------------------------------
# inference and training


def predict_logits(model, batch):
    """Pure-function logits for a raw input batch (images or token ids)."""
    if model.kind == "cnn":
        return model.forward(np.asarray(batch, dtype=np.float64))["logits"].data
    return model.forward(np.asarray(batch))["logits"].data


def feature_activations(model, layer_id, batch):
    """Post-activation tensor values at a named layer."""
    acts = model.forward(batch)
    key = {"fc2": "logits", "fc": "logits"}.get(layer_id, layer_id)
    if key not in acts:
        raise KeyError(f"unknown layer {layer_id!r}")
    return acts[key].data


def accuracy(model, split_set):
    inputs, labels = model.input_batches(split_set)
    preds = []
    for i in range(0, len(labels), 64):
        preds.append(np.argmax(predict_logits(model, inputs[i:i + 64]), axis=1))
    return float(np.mean(np.concatenate(preds) == labels))


def train_classifier(model, dataset, epochs=30, lr=1e-3, seed=0, batch_size=8,
                     optimizer="adam"):
    """Train in place; returns per-epoch (train_acc, val_acc) history."""
    train = dataset["train"]
    inputs, labels = model.input_batches(train)
    n = len(labels)
    opt = nc.OptimState(optimizer, model.parameters(), lr=lr)
    order_stream = RngStream(seed, stream=7001)
    history = []
    for epoch in range(epochs):
        order = order_stream.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            nc.zero_grads(model.parameters())
            acts = model.forward(inputs[idx])
            loss = nc.softmax_cross_entropy(acts["logits"], labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch)
            nc.backward(loss)
            opt.step()
        history.append((accuracy(model, train), accuracy(model, dataset["val"])))
    return history


def randomize_from_layer(model, layer_id, seed):
    """Copy of `model` with `layer_id` and every later layer re-initialized
    with the original init scheme; earlier layers are bit-identical."""
    if layer_id not in model.layer_ids:
        raise KeyError(f"unknown layer {layer_id!r}")
    clone = type(model)(seed=0)
    for k, v in model.params.items():
        clone.params[k].data = v.data.copy()
    start = model.layer_ids.index(layer_id)
    for depth, layer in enumerate(model.layer_ids[start:]):
        clone._init_layer(layer, RngStream(seed, stream=9100 + start + depth))
    for p in clone.parameters():
        p.requires_grad = True
    return clone


# ---------------------------------------------------------------------------
# checkpoints: magic "PIBC", u16 version, kind tag, named parameter blobs


def save_checkpoint(model, path, meta=""):
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    kind = model.kind.encode()
    parts.append(struct.pack("<H", len(kind)))
    parts.append(kind)
    meta_b = meta.encode()
    parts.append(struct.pack("<I", len(meta_b)))
    parts.append(meta_b)
    parts.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()

    def take(off, k):
        if off + k > len(buf):
            raise TruncatedPayload("checkpoint truncated")
        return buf[off:off + k], off + k

    raw, off = take(0, 4)
    if raw != CKPT_MAGIC:
        raise MagicMismatch(f"bad magic {raw!r}")
    raw, off = take(off, 2)
    if struct.unpack("<H", raw)[0] != CKPT_VERSION:
        raise VersionMismatch("unsupported checkpoint version")
    raw, off = take(off, 2)
    klen = struct.unpack("<H", raw)[0]
    raw, off = take(off, klen)
    kind = raw.decode()
    if kind not in ("cnn", "rnn"):
        raise FormatError(f"unknown model kind {kind!r}")
    raw, off = take(off, 4)
    mlen = struct.unpack("<I", raw)[0]
    _, off = take(off, mlen)
    raw, off = take(off, 4)
    n_params = struct.unpack("<I", raw)[0]

    model = SmallCnn() if kind == "cnn" else SmallRnn()
    seen = set()
    for _ in range(n_params):
        raw, off = take(off, 2)
        nlen = struct.unpack("<H", raw)[0]
        raw, off = take(off, nlen)
        name = raw.decode()
        raw, off = take(off, 1)
        ndim = raw[0]
        raw, off = take(off, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(shape)) if ndim else 1
        raw, off = take(off, 8 * count)
        if name not in model.params:
            raise FormatError(f"unexpected parameter {name!r}")
        model.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise FormatError(f"missing parameters: {sorted(missing)}")
    return model
