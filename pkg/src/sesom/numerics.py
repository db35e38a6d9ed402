"""Dense numerics: activations, normalisation, losses, seeded RNG, FD oracle.

All arrays are float64. Functions accept 1-D vectors and, where it makes
sense, batches whose last axis is the feature axis.
"""
import zlib

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import DegenerateInputError, DimensionError, NumericError

LN_EPS = 1e-5
ACTIVATIONS = ("relu", "gelu", "silu")

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_real(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _rows(x):
    x = as_real(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("expected a non-empty last axis")
    return x, x.reshape(-1, x.shape[-1])


def check_finite(x, what="array"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


# -- seeded randomness ------------------------------------------------------

def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed, *stream):
    """Deterministic generator for ``seed`` and a named sub-stream.

    ``make_rng(7, "episode", 3)`` always yields the same PCG64 stream,
    independent of any other stream drawn from seed 7, which is what keeps
    per-seed results isolated from one another.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in stream))
    return np.random.Generator(np.random.PCG64(ss))


def split_rng(rng, n):
    """Spawn ``n`` independent child generators from ``rng``."""
    return [np.random.Generator(np.random.PCG64(s)) for s in rng.bit_generator.seed_seq.spawn(n)]


# -- activations -----------------------------------------------------------

def activation(v, kind="relu"):
    v = as_real(v)
    if kind == "relu":
        return np.maximum(v, 0.0)
    if kind == "gelu":
        return 0.5 * v * (1.0 + erf(v * _SQRT_HALF))
    if kind == "silu":
        return v / (1.0 + np.exp(-v))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(v, kind="relu"):
    """Elementwise derivative of ``activation`` at ``v`` (relu'(0) := 0)."""
    v = as_real(v)
    if kind == "relu":
        return (v > 0.0).astype(np.float64)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(v * _SQRT_HALF))
        return cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-v))
        return s * (1.0 + v * (1.0 - s))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# -- softmax / layer norm --------------------------------------------------

def softmax(v):
    """Softmax over the last axis, max-subtracted."""
    x, flat = _rows(v)
    return kernels.softmax_rows(flat).reshape(x.shape)


def softmax_backward(p, gp):
    p, pf = _rows(p)
    gp = as_real(gp).reshape(pf.shape)
    return kernels.softmax_rows_backward(pf, gp).reshape(p.shape)


def layer_norm(v, gain, bias, eps=LN_EPS):
    out, _ = layer_norm_forward(v, gain, bias, eps)
    return out


def layer_norm_forward(v, gain, bias, eps=LN_EPS):
    """Returns ``(out, cache)``; the cache feeds ``layer_norm_backward``.

    A row with zero variance and ``eps == 0`` collapses to ``bias``.
    """
    x, flat = _rows(v)
    gain = as_real(gain)
    bias = as_real(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"gain/bias must have length {x.shape[-1]}, got {gain.shape} and {bias.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    out, xhat, inv_std = kernels.layer_norm_rows(flat, gain, bias, float(eps))
    return out.reshape(x.shape), (xhat, inv_std, gain, x.shape)


def layer_norm_backward(gout, cache):
    """Gradients ``(d_input, d_gain, d_bias)`` for a ``layer_norm_forward`` call."""
    xhat, inv_std, gain, shape = cache
    g = as_real(gout).reshape(xhat.shape)
    gx, ggain, gbias = kernels.layer_norm_rows_backward(g, xhat, inv_std, gain)
    return gx.reshape(shape), ggain, gbias


# -- losses ----------------------------------------------------------------

def log_softmax(v):
    x = as_real(v)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``logits``.

    With a 2-D ``logits`` of shape (B, v) and a length-B ``target`` the loss is
    the batch mean and the gradient is scaled accordingly.
    """
    x = as_real(logits)
    if x.ndim == 1:
        if x.size == 0:
            raise DimensionError("empty logits")
        t = int(target)
        if not 0 <= t < x.size:
            raise IndexError(f"target {t} out of range for {x.size} classes")
        p = softmax(x)
        loss = -log_softmax(x)[t]
        grad = p.copy()
        grad[t] -= 1.0
        return float(loss), grad
    t = np.asarray(target, dtype=np.int64)
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise DimensionError(f"logits {x.shape} and targets {t.shape} do not line up")
    if t.size and (t.min() < 0 or t.max() >= x.shape[1]):
        raise IndexError("target out of range")
    b = np.arange(x.shape[0])
    loss = -log_softmax(x)[b, t].mean()
    grad = softmax(x)
    grad[b, t] -= 1.0
    grad /= x.shape[0]
    return float(loss), grad


# -- pooling / similarity --------------------------------------------------

def max_pool_rows(X):
    """Columnwise max over the rows of an ``l x d`` matrix."""
    X = as_real(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionError(f"max_pool_rows needs an l x d matrix with l >= 1, got {X.shape}")
    return kernels.max_pool_rows(X)


def cosine_similarity(a, b):
    a = as_real(a).ravel()
    b = as_real(b).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# -- finite differences ----------------------------------------------------

def finite_diff_grad(f, p, h=1e-4):
    """Central-difference gradient of scalar ``f`` at ``p`` (any shape)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    p = as_real(p).copy()
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(p)
        flat[i] = orig - h
        fm = f(p)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.shape)


def relative_error(a, b, floor=1e-12):
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a = as_real(a).ravel()
    b = as_real(b).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
