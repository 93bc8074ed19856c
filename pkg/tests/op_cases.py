"""Random scalar-valued probes for every differentiable op.

Each factory draws a fresh instance from ``rng`` and returns ``(f, x)``
where ``f`` maps a Tensor shaped like ``x`` to a scalar Tensor. Outputs
are contracted with a fixed random weight so every output coordinate
contributes to the gradient.
"""

import numpy as np

from fnetar import numerics as nx
from fnetar.numerics import Tensor


def _probe(out_shape, rng):
    r = Tensor(rng.standard_normal(out_shape))
    return lambda y: nx.reduce_sum(nx.multiply(y, r))


def _unary(op, shape_fn):
    def make(rng):
        shape = shape_fn(rng)
        x = Tensor(rng.standard_normal(shape))
        with nx.no_grad():
            out_shape = op(x).shape
        p = _probe(out_shape, rng)
        return (lambda t: p(op(t))), x
    return make


def _shape2(rng):
    return (int(rng.integers(1, 5)), int(rng.integers(2, 6)))


def _shape3(rng):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 5)))


def _add(rng):
    shape = _shape3(rng)
    other = Tensor(rng.standard_normal(shape[1:]))
    return _unary(lambda t: nx.add(t, other), lambda _: shape)(rng)


def _add_broadcast_side(rng):
    shape = _shape3(rng)
    other = Tensor(rng.standard_normal(shape))
    return _unary(lambda t: nx.add(other, t), lambda _: shape[1:])(rng)


def _multiply(rng):
    shape = _shape2(rng)
    other = Tensor(rng.standard_normal(shape))
    return _unary(lambda t: nx.multiply(t, other), lambda _: shape)(rng)


def _matmul_left(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, size=3))
    b = Tensor(rng.standard_normal((k, n)))
    return _unary(lambda t: nx.matmul(t, b), lambda _: (2, m, k))(rng)


def _matmul_right(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, size=3))
    a = Tensor(rng.standard_normal((2, m, k)))
    return _unary(lambda t: nx.matmul(a, t), lambda _: (2, k, n))(rng)


def _concat(rng):
    shape = _shape2(rng)
    other = Tensor(rng.standard_normal((3, shape[1])))
    return _unary(lambda t: nx.concat([other, t, other], axis=0), lambda _: shape)(rng)


def _slice(rng):
    return _unary(lambda t: t[..., 1:, :2], lambda r: (2, int(r.integers(2, 5)), 3))(rng)


def _transpose(rng):
    return _unary(lambda t: nx.transpose(t, (1, 2, 0)), _shape3)(rng)


def _reshape(rng):
    return _unary(lambda t: nx.reshape(t, (-1,)), _shape3)(rng)


def _embedding(rng):
    rows = int(rng.integers(2, 6))
    ids = rng.integers(0, rows, size=(2, 4))
    return _unary(lambda t: nx.embedding_lookup(t, ids), lambda _: (rows, 3))(rng)


def _softmax(rng):
    return _unary(lambda t: nx.softmax(t, axis=-1), _shape2)(rng)


def _softmax_masked(rng):
    n = int(rng.integers(2, 6))
    mask = np.tril(np.ones((n, n), dtype=bool))
    return _unary(lambda t: nx.softmax(t, axis=-1, mask=mask), lambda _: (n, n))(rng)


def _layer_norm_x(rng):
    # at width 2 the normalized row is +-1 whatever the input, so the input
    # gradient is of order eps and the relative metric only sees roundoff
    d = int(rng.integers(3, 7))
    g = Tensor(rng.standard_normal(d))
    b = Tensor(rng.standard_normal(d))
    return _unary(lambda t: nx.layer_norm(t, g, b), lambda r: (int(r.integers(1, 4)), d))(rng)


def _layer_norm_gain(rng):
    d = int(rng.integers(2, 6))
    x = Tensor(rng.standard_normal((3, d)))
    b = Tensor(rng.standard_normal(d))
    return _unary(lambda t: nx.layer_norm(x, t, b), lambda _: (d,))(rng)


def _layer_norm_bias(rng):
    d = int(rng.integers(2, 6))
    x = Tensor(rng.standard_normal((3, d)))
    g = Tensor(rng.standard_normal(d))
    return _unary(lambda t: nx.layer_norm(x, g, t), lambda _: (d,))(rng)


def _relu(rng):
    return _unary(nx.relu, _shape2)(rng)


def _scale(rng):
    c = float(rng.standard_normal())
    return _unary(lambda t: nx.scale(t, c), _shape2)(rng)


def _cross_entropy(rng):
    t_count, v = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    targets = rng.integers(0, v, size=t_count)
    return (lambda t: nx.cross_entropy_logits(t, targets)), Tensor(rng.standard_normal((t_count, v)))


OP_CASES = {
    "add": _add,
    "add_broadcast": _add_broadcast_side,
    "multiply": _multiply,
    "scale": _scale,
    "relu": _relu,
    "matmul": _matmul_left,
    "matmul_right": _matmul_right,
    "concat": _concat,
    "slice": _slice,
    "transpose": _transpose,
    "reshape": _reshape,
    "embedding": _embedding,
    "softmax": _softmax,
    "softmax_masked": _softmax_masked,
    "layer_norm": _layer_norm_x,
    "layer_norm_gain": _layer_norm_gain,
    "layer_norm_bias": _layer_norm_bias,
    "cross_entropy": _cross_entropy,
}
