"""Shared test oracles."""

import numpy as np

from gprsim import autodiff as ad


def gradcheck(fn, arrays, h=1e-4, seed=0):
    """Largest relative error between reverse-mode and central-difference gradients.

    ``fn`` maps Tensors to a Tensor; it is reduced to a scalar with fixed
    random weights so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=float) for a in arrays]
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    weights = rng.standard_normal(out.shape)
    (out * weights).sum().backward()

    def scalar(vals):
        with ad.no_grad():
            return float((fn(*[ad.Tensor(v) for v in vals]).data * weights).sum())

    worst = 0.0
    for i, a in enumerate(arrays):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            num[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
        ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(a)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
        worst = max(worst, np.linalg.norm(num - ana) / scale)
    return worst


def away_from(x, points, gap=1e-2):
    """Nudge entries of ``x`` so none lies within ``gap`` of a kink."""
    x = np.array(x, dtype=float)
    for p in points:
        close = np.abs(x - p) < gap
        x[close] = p + np.where(x[close] >= p, gap, -gap) * 2
    return x


def random_shape(rng, ndim):
    return tuple(int(k) for k in rng.integers(1, 4, size=ndim))


def op_cases():
    """``(name, builder)`` pairs; each builder takes an rng and returns ``(fn, arrays)``."""

    def unary(f, lo=-2.0, hi=2.0, kinks=()):
        def build(rng):
            shape = random_shape(rng, int(rng.integers(1, 4)))
            x = away_from(rng.uniform(lo, hi, shape), kinks)
            return f, [x]
        return build

    def binary(f, positive_b=False):
        def build(rng):
            shape = random_shape(rng, int(rng.integers(1, 4)))
            # b broadcasts along a random subset of axes
            bshape = tuple(1 if rng.random() < 0.3 else s for s in shape)
            a = rng.uniform(-2, 2, shape)
            b = rng.uniform(0.5, 2.0, bshape) if positive_b else rng.uniform(-2, 2, bshape)
            return f, [a, b]
        return build

    def matmul(rng):
        kind = int(rng.integers(0, 3))
        n, k, m = (int(v) for v in rng.integers(1, 4, 3))
        if kind == 0:
            return (lambda a, b: a @ b), [rng.standard_normal((n, k)), rng.standard_normal((k, m))]
        if kind == 1:
            B = int(rng.integers(1, 3))
            return (lambda a, b: a @ b), [rng.standard_normal((B, 2, n, k)), rng.standard_normal((2, k, m))]
        return (lambda a, b: a @ b), [rng.standard_normal((2, n, k)), rng.standard_normal(k)]

    def minmax(f):
        def build(rng):
            shape = random_shape(rng, 2)
            a = rng.uniform(-2, 2, shape)
            b = a + np.where(rng.random(shape) < 0.5, -1, 1) * rng.uniform(0.05, 1, shape)
            return f, [a, b]
        return build

    def shape_ops(rng):
        x = rng.standard_normal((2, 3, 4))
        pick = int(rng.integers(0, 5))
        fns = [
            lambda t: t.reshape(3, 8),
            lambda t: t.swapaxes(0, 2),
            lambda t: t[:, 1:, ::2],
            lambda t: t[np.array([1, 0, 1]), np.array([0, 2, 2])],
            lambda t: t.sum(axis=1, keepdims=True) * t.mean(axis=(0, 2)).reshape(1, 3, 1),
        ]
        return fns[pick], [x]

    def concat(rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, int(rng.integers(1, 4))))
        return (lambda x, y: ad.concat([x, y], axis=-1)), [a, b]

    return [
        ("add", binary(lambda a, b: a + b)),
        ("sub", binary(lambda a, b: a - b)),
        ("mul", binary(lambda a, b: a * b)),
        ("div", binary(lambda a, b: a / b, positive_b=True)),
        ("rdiv", unary(lambda x: 1.5 / x, 0.5, 2.0)),
        ("pow", unary(lambda x: x ** 2)),
        ("neg_rsub", unary(lambda x: 1.0 - (-x))),
        ("matmul", matmul),
        ("exp", unary(ad.exp)),
        ("log", unary(ad.log, 0.1, 3.0)),
        ("sqrt", unary(ad.sqrt, 0.1, 3.0)),
        ("tanh", unary(ad.tanh)),
        ("relu", unary(ad.relu, kinks=(0.0,))),
        ("clip", unary(lambda x: ad.clip(x, -1.0, 1.0), kinks=(-1.0, 1.0))),
        ("minimum", minmax(ad.minimum)),
        ("maximum", minmax(ad.maximum)),
        ("softmax", unary(lambda x: ad.softmax(x, axis=-1))),
        ("log_softmax", unary(lambda x: ad.log_softmax(x, axis=-1))),
        ("shape_ops", shape_ops),
        ("concat", concat),
    ]
