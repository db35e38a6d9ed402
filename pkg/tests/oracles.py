"""Scalar reference implementations shared by the unit and acceptance tests.

These are deliberately written with plain Python loops and floats so they
share no code path with the vectorised package.
"""
import math


def layer_norm(v, gain, bias, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [g * (x - mu) / math.sqrt(var + eps) + b for x, g, b in zip(v, gain, bias)]


def project(vec, w_down, w_up, gain, bias):
    """LN(W_up^T relu(W_down^T vec)), one scalar at a time."""
    hidden = []
    for j in range(len(w_down[0])):
        s = 0.0
        for i in range(len(vec)):
            s += w_down[i][j] * vec[i]
        hidden.append(max(0.0, s))
    out = []
    for k in range(len(w_up[0])):
        s = 0.0
        for j in range(len(hidden)):
            s += w_up[j][k] * hidden[j]
        out.append(s)
    return layer_norm(out, gain, bias)


def attention(x_hat, source_logits, p, keys=None):
    """Weights and combined logits of the attention module for one sample."""
    keys = source_logits if keys is None else keys
    hx = project(x_hat, p["w_dx"], p["w_ux"], p["lnx_gain"], p["lnx_bias"])
    scores = []
    for key in keys:
        hl = project(key, p["w_dl"], p["w_ul"], p["lnl_gain"], p["lnl_bias"])
        scores.append(sum(a * b for a, b in zip(hl, hx)))
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    z = sum(e)
    weights = [x / z for x in e]
    combined = [sum(weights[j] * source_logits[j][i] for j in range(len(weights)))
                for i in range(len(source_logits[0]))]
    return weights, combined


# A fixed tiny instance: d=2, v=3, T=2, d'_x = d'_l = d' = 2.
TINY = {
    "w_dx": [[0.5, -1.0], [1.5, 0.25]],
    "w_ux": [[1.0, -0.5], [0.75, 2.0]],
    "lnx_gain": [1.0, 0.5], "lnx_bias": [0.0, 0.1],
    "w_dl": [[0.2, 0.7], [-0.4, 1.1], [0.9, -0.3]],
    "w_ul": [[1.2, 0.3], [-0.6, 0.8]],
    "lnl_gain": [0.9, 1.1], "lnl_bias": [-0.2, 0.05],
}
TINY_X = [1.0, 2.0]
TINY_L = [[2.0, -1.0, 0.5], [0.0, 3.0, 1.0]]
