"""Fused batch-norm + PReLU kernels over channels-last ``[rows, channels]`` arrays."""

import numpy as np
from numba import njit


@njit(cache=True)
def bn_prelu_train(z, bias, gamma, beta, slope, eps, xhat, out, mean, var):
    n, c = z.shape
    s1 = np.zeros(c)
    s2 = np.zeros(c)
    for i in range(n):
        for j in range(c):
            v = z[i, j] + bias[j]
            s1[j] += v
            s2[j] += v * v
    inv = np.empty(c, dtype=z.dtype)
    for j in range(c):
        mu = s1[j] / n
        vr = max(s2[j] / n - mu * mu, 0.0)
        mean[j] = mu
        var[j] = vr
        inv[j] = 1.0 / np.sqrt(vr + eps)
    for i in range(n):
        for j in range(c):
            xh = (z[i, j] + bias[j] - mean[j]) * inv[j]
            xhat[i, j] = xh
            h = xh * gamma[j] + beta[j]
            out[i, j] = h if h > 0 else h * slope[j]
    return inv


@njit(cache=True)
def bn_prelu_eval(z, bias, gamma, beta, slope, mean, inv, xhat, out):
    n, c = z.shape
    for i in range(n):
        for j in range(c):
            xh = (z[i, j] + bias[j] - mean[j]) * inv[j]
            xhat[i, j] = xh
            h = xh * gamma[j] + beta[j]
            out[i, j] = h if h > 0 else h * slope[j]


@njit(cache=True)
def bn_prelu_backward(d, xhat, gamma, beta, slope, inv, train, dz, dgamma, dbeta, dslope):
    """Writes the pre-BN gradient into ``dz``; per-channel sums into the d* vectors."""
    n, c = d.shape
    sg = np.zeros(c)
    sb = np.zeros(c)
    ss = np.zeros(c)
    for i in range(n):
        for j in range(c):
            xh = xhat[i, j]
            h = xh * gamma[j] + beta[j]
            g = d[i, j]
            if h > 0:
                dh = g
            else:
                ss[j] += g * h
                dh = g * slope[j]
            sg[j] += dh * xh
            sb[j] += dh
            dz[i, j] = dh
    for j in range(c):
        dgamma[j] = sg[j]
        dbeta[j] = sb[j]
        dslope[j] = ss[j]
    if train:
        for i in range(n):
            for j in range(c):
                dz[i, j] = gamma[j] * inv[j] * (dz[i, j] - (sb[j] + xhat[i, j] * sg[j]) / n)
    else:
        for i in range(n):
            for j in range(c):
                dz[i, j] = dz[i, j] * gamma[j] * inv[j]


@njit(cache=True)
def active_mask(xhat, gamma, beta, out):
    n, c = xhat.shape
    for i in range(n):
        for j in range(c):
            out[i, j] = xhat[i, j] * gamma[j] + beta[j] > 0
