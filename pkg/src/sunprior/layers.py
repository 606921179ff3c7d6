"""Hand-written reverse-mode pieces for the small networks in this package.

Each ``*_forward`` returns the output plus whatever the matching
``*_backward`` needs. Everything runs in float64 so finite-difference checks
stay meaningful.
"""

import numpy as np


def dense_forward(x, W, b):
    return x @ W + b


def dense_backward(x, W, dy):
    """Returns ``(dx, dW, db)`` for ``y = x @ W + b``."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def silu(x):
    s = sigmoid(x)
    return x * s, s


def silu_backward(x, s, dy):
    return dy * (s * (1.0 + x * (1.0 - s)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def layer_norm(x, eps):
    """Normalize over the last axis without affine parameters."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layer_norm_backward(xhat, inv, dy):
    n = xhat.shape[-1]
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - xhat * (dy * xhat).sum(axis=-1, keepdims=True) / n)


def glorot(rng, fan_in, fan_out, scale=1.0):
    return rng.normal(0.0, scale * np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
