"""Minimal tensor autodiff engine: float64 tensors, a reverse-mode tape,
Adam/RMSProp, and counter-based deterministic random streams.

The computation graph doubles as the tape: every op returns a new Tensor
node holding its parents and a vector-Jacobian closure. `backward` walks
the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class NumericError(ValueError):
    """Non-finite values or invalid numeric arguments."""


class ShapeError(ValueError):
    """Incompatible operand shapes."""


def _as_f64(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A node in the computation graph.

    Leaf tensors are either parameters (requires_grad=True) or constants.
    Non-leaf tensors carry their parents and a backward closure.
    """

    __slots__ = ("data", "requires_grad", "parents", "_vjp", "grad")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = _as_f64(data)
        if not parents and not np.all(np.isfinite(self.data)):
            raise NumericError("non-finite values in tensor")
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self._vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={not self.parents})"

    # operator sugar; scalars are the only permitted broadcast
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _node(data, parents, vjp):
    out = Tensor(data, parents=parents, vjp=vjp)
    return out


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim and b.data.ndim and a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def vjp(g):
        ga = g if a.data.ndim == g.ndim else np.sum(g)
        gb = g if b.data.ndim == g.ndim else np.sum(g)
        return ga, gb

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim and b.data.ndim and a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")

    def vjp(g):
        ga = g if a.data.ndim == g.ndim else np.sum(g)
        gb = -g if b.data.ndim == g.ndim else -np.sum(g)
        return ga, gb

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim and b.data.ndim and a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")

    def vjp(g):
        ga = g * b.data
        gb = g * a.data
        if a.data.ndim != g.ndim:
            ga = np.sum(ga)
        if b.data.ndim != g.ndim:
            gb = np.sum(gb)
        return ga, gb

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim and b.data.ndim and a.data.shape != b.data.shape:
        raise ShapeError(f"div: shape mismatch {a.data.shape} vs {b.data.shape}")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        if a.data.ndim != g.ndim:
            ga = np.sum(ga)
        if b.data.ndim != g.ndim:
            gb = np.sum(gb)
        return ga, gb

    return _node(a.data / b.data, (a, b), vjp)


def repeat0(x, k):
    """Stack k copies of x along a new leading axis; gradients sum back."""
    x = _wrap(x)
    out = np.broadcast_to(x.data, (k,) + x.data.shape).copy()

    def vjp(g):
        return (np.sum(g, axis=0),)

    return _node(out, (x,), vjp)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp)


def add_bias(x, b):
    """Add a vector bias to the trailing axis (rows of a 2-D tensor, or the
    channel axis of an NCHW tensor when b matches axis 1)."""
    x, b = _wrap(x), _wrap(b)
    if x.data.ndim == 2 and b.data.shape == (x.data.shape[1],):
        def vjp(g):
            return g, np.sum(g, axis=0)

        return _node(x.data + b.data, (x, b), vjp)
    if x.data.ndim == 4 and b.data.shape == (x.data.shape[1],):
        def vjp(g):
            return g, np.sum(g, axis=(0, 2, 3))

        return _node(x.data + b.data[None, :, None, None], (x, b), vjp)
    raise ShapeError(f"add_bias: bias {b.data.shape} does not fit {x.data.shape}")


def relu(x):
    x = _wrap(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), vjp)


def sigmoid(x):
    x = _wrap(x)
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _node(s, (x,), vjp)


def tanh(x):
    x = _wrap(x)
    t = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return _node(t, (x,), vjp)


def exp(x):
    x = _wrap(x)
    e = np.exp(x.data)
    if not np.all(np.isfinite(e)):
        raise NumericError("exp overflow")

    def vjp(g):
        return (g * e,)

    return _node(e, (x,), vjp)


def log(x):
    x = _wrap(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")

    def vjp(g):
        return (g / x.data,)

    return _node(np.log(x.data), (x,), vjp)


def softplus(x):
    x = _wrap(x)
    v = np.logaddexp(0.0, x.data)
    s = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))

    def vjp(g):
        return (g * s,)

    return _node(v, (x,), vjp)


def tsum(x):
    x = _wrap(x)

    def vjp(g):
        return (np.full(x.data.shape, float(g)),)

    return _node(np.sum(x.data), (x,), vjp)


def tmean(x):
    x = _wrap(x)
    n = x.data.size

    def vjp(g):
        return (np.full(x.data.shape, float(g) / n),)

    return _node(np.mean(x.data), (x,), vjp)


def reshape(x, shape):
    x = _wrap(x)
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _node(x.data.reshape(shape), (x,), vjp)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def conv2d(x, w, stride=1):
    """3x3 convolution, stride 1, zero padding 1, NCHW x OC33 weights."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: expected NCHW input and (O,C,3,3) kernel, "
                         f"got {x.data.shape}, {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("conv2d: channel mismatch")
    n, c, h, wd = x.data.shape
    o = w.data.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # columns: (N, C*9, H*W)
    cols = np.empty((n, c * 9, h * wd))
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[:, k::9, :] = xp[:, :, di:di + h, dj:dj + wd].reshape(n, c, h * wd)
    # kernel taps interleaved to match the column layout above
    wmat = w.data.transpose(1, 2, 3, 0).reshape(c * 9, o)
    out = np.einsum("nkp,ko->nop", cols, wmat, optimize=True).reshape(n, o, h, wd)

    def vjp(g):
        gmat = g.reshape(n, o, h * wd)
        gw = np.einsum("nkp,nop->ko", cols, gmat, optimize=True)
        gw = gw.reshape(c, 3, 3, o).transpose(3, 0, 1, 2)
        gcols = np.einsum("ko,nop->nkp", wmat, gmat, optimize=True)
        gxp = np.zeros_like(xp)
        for k in range(9):
            di, dj = divmod(k, 3)
            gxp[:, :, di:di + h, dj:dj + wd] += gcols[:, k::9, :].reshape(n, c, h, wd)
        return gxp[:, :, 1:-1, 1:-1], gw

    return _node(out, (x, w), vjp)


def maxpool2(x):
    """2x2 max pooling, stride 2, NCHW."""
    x = _wrap(x)
    if x.data.ndim != 4 or x.data.shape[2] % 2 or x.data.shape[3] % 2:
        raise ShapeError(f"maxpool2: bad shape {x.data.shape}")
    n, c, h, w = x.data.shape
    xr = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(xr, axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gr = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gr = gr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gr.reshape(n, c, h, w),)

    return _node(out, (x,), vjp)


def embedding(table, ids):
    """Lookup rows of `table` (V,E) by an integer id array."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ShapeError("embedding: id out of range")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels, fused and max-shifted."""
    logits = _wrap(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError("softmax_cross_entropy: logits must be (N,C), labels (N,)")
    z = logits.data - np.max(logits.data, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=1))
    n = labels.shape[0]
    losses = logsumexp - z[np.arange(n), labels]
    probs = np.exp(z - logsumexp[:, None])

    def vjp(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        return (float(g) * gl / n,)

    return _node(np.mean(losses), (logits,), vjp)


def softmax(logits):
    """Plain softmax over the last axis (no grad path needed by callers)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def gaussian(stream, mu, sigma):
    """Reparameterized Gaussian sample mu + sigma * eta; eta is recorded as a
    constant so gradients reach mu and sigma."""
    mu, sigma = _wrap(mu), _wrap(sigma)
    _same_shape(mu, sigma, "gaussian")
    if np.any(sigma.data < 0):
        raise NumericError("gaussian: negative sigma")
    eta = stream.normal(mu.data.shape)
    return add(mu, mul(sigma, Tensor(eta)))


def gru_step(x, h, params):
    """One GRU-style recurrent step. `params` maps wz,uz,bz,wr,ur,br,wh,uh,bh."""
    z = sigmoid(add_bias(add(matmul(x, params["wz"]), matmul(h, params["uz"])), params["bz"]))
    r = sigmoid(add_bias(add(matmul(x, params["wr"]), matmul(h, params["ur"])), params["br"]))
    hh = tanh(add_bias(add(matmul(x, params["wh"]), matmul(mul(r, h), params["uh"])), params["bh"]))
    return add(mul(sub(1.0, z), h), mul(z, hh))


# ---------------------------------------------------------------------------
# backward pass


def backward(root):
    """Accumulate gradients of a scalar root into `.grad` of every node
    reachable from it. Returns nothing; read grads off the leaves."""
    if not isinstance(root, Tensor):
        raise TypeError("backward: root must be a Tensor")
    if root.data.size != 1:
        raise ShapeError("backward: root is not scalar")
    if not np.all(np.isfinite(root.data)):
        raise NumericError("backward: non-finite root")

    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)


def zero_grads(params):
    for p in params:
        p.grad = None


def grad_check(f, x, h=1e-4):
    """Max relative error between the analytic gradient of scalar f at x and
    central differences with step h."""
    if h <= 0:
        raise NumericError("grad_check: h must be positive")
    leaf = Tensor(x.data.copy() if isinstance(x, Tensor) else x, requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = leaf.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(leaf.data.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(leaf.data.copy())).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError("grad_check: non-finite evaluation")
    denom = np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(np.max(np.abs(analytic.reshape(-1) - numeric) / denom))


# ---------------------------------------------------------------------------
# optimizers


class OptimState:
    """Adam or RMSProp state over an ordered list of parameter tensors."""

    def __init__(self, kind, params, lr, beta1=0.9, beta2=0.999, alpha=0.99,
                 eps=1e-8):
        if kind not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.alpha, self.eps = beta1, beta2, alpha, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError("optimizer: gradient shape mismatch")
            if self.kind == "adam":
                self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
                self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
                mhat = self.m[i] / (1 - self.beta1 ** self.step_count)
                vhat = self.v[i] / (1 - self.beta2 ** self.step_count)
                p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                self.v[i] = self.alpha * self.v[i] + (1 - self.alpha) * g * g
                p.data -= self.lr * g / (np.sqrt(self.v[i]) + self.eps)


# ---------------------------------------------------------------------------
# deterministic random streams


def _mix64(x):
    # splitmix64 finalizer; used only to derive child stream ids
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class RngStream:
    """Counter-based (Philox) random stream keyed by (seed, stream id).

    Identical keys give identical sequences on every platform; child streams
    derived with distinct indices are statistically independent.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, index):
        return RngStream(self.seed, _mix64(self.stream * 0x100000001B3 + int(index) + 1))

    def normal(self, shape=()):
        return self._gen.standard_normal(shape)

    def uniform(self, shape=(), low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high, shape=()):
        return self._gen.integers(low, high, size=shape)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)
