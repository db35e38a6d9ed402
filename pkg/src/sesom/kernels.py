"""Row-wise hot kernels with a numba path and a vectorised numpy path.

Every kernel works on 2-D float64 arrays whose last axis is the reduced
axis; callers reshape higher-rank tensors to ``(-1, n)`` first. The public
names at the bottom resolve to one of the two implementations depending on
``SESOM_DISABLE_NUMBA`` (see ``_accel``). Both implementations stay
importable so the benchmark and the parity tests can compare them.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward_np(p, gp):
    dot = (gp * p).sum(axis=1, keepdims=True)
    return p * (gp - dot)


def layer_norm_rows_np(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    denom = var + eps
    inv_std = np.zeros_like(denom)
    np.divide(1.0, np.sqrt(denom), out=inv_std, where=denom > 0.0)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0].copy()


def layer_norm_rows_backward_np(gout, xhat, inv_std, gain):
    n = xhat.shape[1]
    gxhat = gout * gain
    ggain = (gout * xhat).sum(axis=0)
    gbias = gout.sum(axis=0)
    s1 = gxhat.sum(axis=1, keepdims=True)
    s2 = (gxhat * xhat).sum(axis=1, keepdims=True)
    gx = (inv_std[:, None] / n) * (n * gxhat - s1 - xhat * s2)
    return gx, ggain, gbias


def map_logits_rows_np(logits, keys, vals):
    out = logits.copy()
    if keys.size:
        a = logits[:, keys]
        b = logits[:, vals]
        out[:, keys] = np.minimum(a, b)
        out[:, vals] = np.maximum(a, b)
    return out


def max_pool_rows_np(x):
    return x.max(axis=0)


def vote_counts_np(preds, n_labels):
    n, t = preds.shape
    counts = np.zeros((n, n_labels), dtype=np.int64)
    rows = np.repeat(np.arange(n), t)
    np.add.at(counts, (rows, preds.ravel()), 1)
    return counts


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

@njit
def softmax_rows_nb(x):
    n, k = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(k):
            out[i, j] /= s
    return out


@njit
def softmax_rows_backward_nb(p, gp):
    n, k = p.shape
    out = np.empty_like(p)
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += gp[i, j] * p[i, j]
        for j in range(k):
            out[i, j] = p[i, j] * (gp[i, j] - dot)
    return out


@njit
def layer_norm_rows_nb(x, gain, bias, eps):
    n, k = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(n)
    for i in range(n):
        mean = 0.0
        for j in range(k):
            mean += x[i, j]
        mean /= k
        var = 0.0
        for j in range(k):
            c = x[i, j] - mean
            var += c * c
        var /= k
        denom = var + eps
        r = 1.0 / math.sqrt(denom) if denom > 0.0 else 0.0
        inv_std[i] = r
        for j in range(k):
            h = (x[i, j] - mean) * r
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return out, xhat, inv_std


@njit
def layer_norm_rows_backward_nb(gout, xhat, inv_std, gain):
    n, k = xhat.shape
    gx = np.empty_like(xhat)
    ggain = np.zeros(k)
    gbias = np.zeros(k)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(k):
            g = gout[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
            ggain[j] += gout[i, j] * xhat[i, j]
            gbias[j] += gout[i, j]
        scale = inv_std[i] / k
        for j in range(k):
            g = gout[i, j] * gain[j]
            gx[i, j] = scale * (k * g - s1 - xhat[i, j] * s2)
    return gx, ggain, gbias


@njit
def map_logits_rows_nb(logits, keys, vals):
    out = logits.copy()
    n = logits.shape[0]
    for i in range(n):
        for q in range(keys.shape[0]):
            a = logits[i, keys[q]]
            b = logits[i, vals[q]]
            if a <= b:
                out[i, keys[q]] = a
                out[i, vals[q]] = b
            else:
                out[i, keys[q]] = b
                out[i, vals[q]] = a
    return out


@njit
def max_pool_rows_nb(x):
    n, k = x.shape
    out = x[0].copy()
    for i in range(1, n):
        for j in range(k):
            if x[i, j] > out[j]:
                out[j] = x[i, j]
    return out


@njit
def vote_counts_nb(preds, n_labels):
    n, t = preds.shape
    counts = np.zeros((n, n_labels), dtype=np.int64)
    for i in range(n):
        for j in range(t):
            counts[i, preds[i, j]] += 1
    return counts


if USE_NUMBA:
    softmax_rows = softmax_rows_nb
    softmax_rows_backward = softmax_rows_backward_nb
    layer_norm_rows = layer_norm_rows_nb
    layer_norm_rows_backward = layer_norm_rows_backward_nb
    map_logits_rows = map_logits_rows_nb
    max_pool_rows = max_pool_rows_nb
    vote_counts = vote_counts_nb
else:
    softmax_rows = softmax_rows_np
    softmax_rows_backward = softmax_rows_backward_np
    layer_norm_rows = layer_norm_rows_np
    layer_norm_rows_backward = layer_norm_rows_backward_np
    map_logits_rows = map_logits_rows_np
    max_pool_rows = max_pool_rows_np
    vote_counts = vote_counts_np
