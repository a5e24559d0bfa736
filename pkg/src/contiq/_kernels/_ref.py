"""Reference numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_native``; the two must agree to
float64 rounding. Expression trees are written to match the compiled loops
operation for operation, so keep the arithmetic grouping as-is when editing.
"""

import math

import numpy as np
from scipy.special import ndtr

INV_SQRT2 = math.sqrt(0.5)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(z):
    """Standard normal CDF, elementwise."""
    return ndtr(np.asarray(z, dtype=np.float64))


def pair_pref_forward(sx, sy):
    """Preference probability for score pairs and its derivative.

    Returns (phat, dphat_dsx) with phat = Phi((sx - sy) / sqrt(2)); the
    derivative w.r.t. sy is the negation of dphat_dsx.
    """
    u = (sx - sy) * INV_SQRT2
    phat = ndtr(u)
    dphat_dsx = np.exp(-0.5 * (u * u)) * INV_SQRT_2PI * INV_SQRT2
    return phat, dphat_dsx


def fidelity_forward(p, phat, lo, hi):
    """Fidelity loss between target and predicted probabilities.

    Both inputs are clamped to [lo, hi] before the square roots. Returns
    (loss, dloss_dphat); the derivative is zero where phat sits outside the
    clamp interval (the clamped loss is flat there).
    """
    cp = np.clip(p, lo, hi)
    cq = np.clip(phat, lo, hi)
    loss = 1.0 - np.sqrt(cp * cq) - np.sqrt((1.0 - cp) * (1.0 - cq))
    interior = ((phat > lo) & (phat < hi)).astype(np.float64)
    dq = (0.5 * np.sqrt((1.0 - cp) / (1.0 - cq)) - 0.5 * np.sqrt(cp / cq)) * interior
    return loss, dq


def relu(z):
    return np.maximum(z, 0.0)


def relu_backward(z, grad_out):
    return np.where(z > 0.0, grad_out, 0.0)


def l2_normalize_rows(v):
    """Project rows onto the unit sphere; zero rows stay zero.

    Returns (unit, norms).
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.sqrt(np.sum(v * v, axis=1))
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = v / safe[:, None]
    return unit, norms


def l2_normalize_backward(unit, norms, grad_unit):
    """Backprop through row normalization; zero-norm rows get zero gradient."""
    dot = np.sum(grad_unit * unit, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    grad_v = (grad_unit - dot * unit) / safe[:, None]
    return np.where((norms > 0.0)[:, None], grad_v, 0.0)


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps):
    """One fused Adam update, in place on param/m/v. step is 1-based."""
    one_m_b1 = 1.0 - beta1
    one_m_b2 = 1.0 - beta2
    m[...] = beta1 * m + one_m_b1 * grad
    v[...] = beta2 * v + one_m_b2 * (grad * grad)
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    param[...] -= (m / bc1) / (np.sqrt(v / bc2) + eps) * lr


def assign_nearest(x, c):
    """Nearest centroid per row of x.

    Returns (labels, dmin_sq): int64 indices into c (ties -> lowest index)
    and squared Euclidean distances to the winning centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d2 = np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    dmin = d2[np.arange(x.shape[0]), labels]
    return labels, dmin
