"""Test helpers: the differentiable-op catalogue used for gradient sweeps.

Each catalogue entry is (name, factory). A factory takes an RngStream and
returns (f, x) where f maps a leaf Tensor to a scalar Tensor through exactly
one op under test (plus a fixed random linear readout so the full Jacobian
is exercised, not just its row sums).
"""

import numpy as np

from piba import numcore as nc
from piba.numcore import RngStream, Tensor


def _readout(rng, shape):
    c = Tensor(rng.normal(shape))

    def scalarize(t):
        return nc.tsum(nc.mul(t, c))

    return scalarize


def _safe_relu_input(rng, shape):
    # keep points away from the kink at 0 so central differences are valid
    return (rng.uniform(shape, 0.1, 1.0)) * np.sign(rng.normal(shape))


def _elementwise(op, sample):
    def factory(rng):
        x = sample(rng, (7,))
        out = _readout(rng, (7,))
        return (lambda t: out(op(t))), x

    return factory


def _binary_left(op):
    def factory(rng):
        x = rng.normal((6,))
        other = Tensor(rng.uniform((6,), 0.5, 1.5))
        out = _readout(rng, (6,))
        return (lambda t: out(op(t, other))), x

    return factory


def _binary_right(op):
    def factory(rng):
        x = rng.uniform((6,), 0.5, 1.5)
        other = Tensor(rng.normal((6,)))
        out = _readout(rng, (6,))
        return (lambda t: out(op(other, t))), x

    return factory


def _matmul_a(rng):
    x = rng.normal((3, 4))
    b = Tensor(rng.normal((4, 2)))
    out = _readout(rng, (3, 2))
    return (lambda t: out(nc.matmul(t, b))), x


def _matmul_b(rng):
    a = Tensor(rng.normal((3, 4)))
    x = rng.normal((4, 2))
    out = _readout(rng, (3, 2))
    return (lambda t: out(nc.matmul(a, t))), x


def _add_bias_rows(rng):
    a = Tensor(rng.normal((4, 3)))
    x = rng.normal((3,))
    out = _readout(rng, (4, 3))
    return (lambda t: out(nc.add_bias(a, t))), x


def _add_bias_chan(rng):
    a = Tensor(rng.normal((2, 3, 4, 4)))
    x = rng.normal((3,))
    out = _readout(rng, (2, 3, 4, 4))
    return (lambda t: out(nc.add_bias(a, t))), x


def _repeat0(rng):
    x = rng.normal((2, 3))
    out = _readout(rng, (4, 2, 3))
    return (lambda t: out(nc.repeat0(t, 4))), x


def _reshape(rng):
    x = rng.normal((3, 4))
    out = _readout(rng, (2, 6))
    return (lambda t: out(nc.reshape(t, (2, 6)))), x


def _concat(rng):
    x = rng.normal((2, 3))
    other = Tensor(rng.normal((2, 3)))
    out = _readout(rng, (4, 3))
    return (lambda t: out(nc.concat([t, other], axis=0))), x


def _conv2d_x(rng):
    x = rng.normal((1, 2, 5, 5))
    w = Tensor(rng.normal((3, 2, 3, 3)))
    out = _readout(rng, (1, 3, 5, 5))
    return (lambda t: out(nc.conv2d(t, w))), x


def _conv2d_w(rng):
    a = Tensor(rng.normal((1, 2, 5, 5)))
    x = rng.normal((3, 2, 3, 3))
    out = _readout(rng, (1, 3, 5, 5))
    return (lambda t: out(nc.conv2d(a, t))), x


def _maxpool(rng):
    # well-separated values so no window has a near-tie at the step size
    x = rng.permutation(32).reshape(1, 2, 4, 4) / 32.0
    out = _readout(rng, (1, 2, 2, 2))
    return (lambda t: out(nc.maxpool2(t))), x


def _embedding(rng):
    x = rng.normal((5, 3))
    ids = rng.integers(0, 5, (4,))
    out = _readout(rng, (4, 3))
    return (lambda t: out(nc.embedding(t, ids))), x


def _softmax_ce(rng):
    x = rng.normal((4, 3))
    labels = rng.integers(0, 3, (4,))
    return (lambda t: nc.softmax_cross_entropy(t, labels)), x


def _gaussian_mu(rng):
    x = rng.normal((5,))
    sigma = Tensor(rng.uniform((5,), 0.2, 1.0))
    key = int(rng.integers(0, 2**31, ()))
    out = _readout(rng, (5,))
    return (lambda t: out(nc.gaussian(RngStream(key), t, sigma))), x


def _gaussian_sigma(rng):
    mu = Tensor(rng.normal((5,)))
    x = rng.uniform((5,), 0.2, 1.0)
    key = int(rng.integers(0, 2**31, ()))
    out = _readout(rng, (5,))
    return (lambda t: out(nc.gaussian(RngStream(key), mu, t))), x


def _gru_x(rng):
    params = {k: Tensor(rng.normal(s)) for k, s in (
        ("wz", (3, 4)), ("uz", (4, 4)), ("bz", (4,)),
        ("wr", (3, 4)), ("ur", (4, 4)), ("br", (4,)),
        ("wh", (3, 4)), ("uh", (4, 4)), ("bh", (4,)))}
    h = Tensor(rng.normal((2, 4)))
    x = rng.normal((2, 3))
    out = _readout(rng, (2, 4))
    return (lambda t: out(nc.gru_step(t, h, params))), x


OP_CATALOGUE = [
    ("add", _binary_left(nc.add)),
    ("sub", _binary_left(nc.sub)),
    ("mul", _binary_left(nc.mul)),
    ("div_num", _binary_left(nc.div)),
    ("div_den", _binary_right(nc.div)),
    ("relu", _elementwise(nc.relu, _safe_relu_input)),
    ("sigmoid", _elementwise(nc.sigmoid, lambda r, s: r.normal(s))),
    ("tanh", _elementwise(nc.tanh, lambda r, s: r.normal(s))),
    ("exp", _elementwise(nc.exp, lambda r, s: r.uniform(s, -1.0, 1.0))),
    ("log", _elementwise(nc.log, lambda r, s: r.uniform(s, 0.5, 2.0))),
    ("softplus", _elementwise(nc.softplus, lambda r, s: r.normal(s))),
    ("tsum", lambda rng: ((lambda t: nc.tsum(t)), rng.normal((7,)))),
    ("tmean", lambda rng: ((lambda t: nc.tmean(t)), rng.normal((7,)))),
    ("matmul_a", _matmul_a),
    ("matmul_b", _matmul_b),
    ("add_bias_rows", _add_bias_rows),
    ("add_bias_chan", _add_bias_chan),
    ("repeat0", _repeat0),
    ("reshape", _reshape),
    ("concat", _concat),
    ("conv2d_x", _conv2d_x),
    ("conv2d_w", _conv2d_w),
    ("maxpool2", _maxpool),
    ("embedding", _embedding),
    ("softmax_cross_entropy", _softmax_ce),
    ("gaussian_mu", _gaussian_mu),
    ("gaussian_sigma", _gaussian_sigma),
    ("gru_step_x", _gru_x),
]
