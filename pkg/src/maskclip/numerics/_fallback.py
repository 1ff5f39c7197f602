"""Pure-numpy implementations of the fused kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Inputs are C-contiguous arrays; row-wise kernels operate on the last
axis of a 2-D view.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def layer_norm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mean, rstd


def layer_norm_backward(dy, x, gamma, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def softmax_forward(x, keep=None):
    # keep: optional (R, C) boolean mask applied to row r as keep[r % R]
    if keep is not None:
        reps = x.shape[0] // keep.shape[0]
        full = np.tile(keep, (reps, 1))
        z = np.where(full, x, -np.inf)
    else:
        z = x
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, dy):
    s = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - s)


def log_softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_backward(y, dy):
    return dy - np.exp(y) * dy.sum(axis=1, keepdims=True)


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, dy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def smooth_l1_forward(a, b, beta):
    d = np.abs(a - b)
    return np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def smooth_l1_backward(a, b, beta, dy):
    d = a - b
    return dy * np.where(np.abs(d) < beta, d / beta, np.sign(d))
