"""Sample-specific ensembling of source-model logits, plus the baselines.

The attention module projects the pooled input ``x_hat`` and every source
model's logits into a shared space (down-projection, activation, optional
dropout, up-projection, layer norm), scores each source by a dot product
with the input's projection, softmaxes the scores over sources and returns
the weighted average of the source logits.
"""
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .backbone import encode_batch, max_pooled_embeddings, read_block, read_magic
from .errors import ConfigError, DimensionError, FormatError
from .numerics import (activation, activation_grad, as_real, cross_entropy, layer_norm_backward,
                       layer_norm_forward, max_pool_rows, softmax, softmax_backward)
from .optim import AdamW
from .prompts import prompt_logits
from .verbalizer import map_logits, predict_label

TRAINABLE = ("w_dx", "w_ux", "lnx_gain", "lnx_bias", "w_dl", "w_ul", "lnl_gain", "lnl_bias")


@dataclass
class AttentionModuleParams:
    w_dx: np.ndarray   # d x d'_x
    w_ux: np.ndarray   # d'_x x d'
    lnx_gain: np.ndarray
    lnx_bias: np.ndarray
    w_dl: np.ndarray   # v x d'_l (d x d'_l for the prompt-keyed variant)
    w_ul: np.ndarray   # d'_l x d'
    lnl_gain: np.ndarray
    lnl_bias: np.ndarray
    dropout: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        d, dx = self.w_dx.shape
        dl = self.w_dl.shape[1]
        dp = self.w_ux.shape[1]
        if (self.w_ux.shape != (dx, dp) or self.w_ul.shape != (dl, dp)
                or any(a.shape != (dp,) for a in (self.lnx_gain, self.lnx_bias,
                                                  self.lnl_gain, self.lnl_bias))):
            raise DimensionError("inconsistent attention-module parameter shapes")

    @property
    def dims(self):
        """``(d, d'_x, d'_l, d', key_dim)``."""
        return (self.w_dx.shape[0], self.w_dx.shape[1], self.w_dl.shape[1],
                self.w_ux.shape[1], self.w_dl.shape[0])

    def arrays(self):
        return {k: getattr(self, k) for k in TRAINABLE}

    def n_trainable(self):
        return sum(a.size for a in self.arrays().values())

    def copy(self):
        return AttentionModuleParams(**{k: a.copy() for k, a in self.arrays().items()},
                                     dropout=self.dropout, activation=self.activation)


def init_attention(d, d_x, d_l, d_prime, key_dim, rng, dropout=0.0, act="relu"):
    """Projections from N(0, 1/fan_in); layer norms at identity."""
    def normal(rows, cols):
        return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))

    return AttentionModuleParams(
        w_dx=normal(d, d_x), w_ux=normal(d_x, d_prime),
        lnx_gain=np.ones(d_prime), lnx_bias=np.zeros(d_prime),
        w_dl=normal(key_dim, d_l), w_ul=normal(d_l, d_prime),
        lnl_gain=np.ones(d_prime), lnl_bias=np.zeros(d_prime),
        dropout=dropout, activation=act)


def param_count(d, d_x, d_l, d_prime, v, T, m):
    """``(extra prompt parameters of the ensemble, attention-module parameters)``."""
    return T * m * d, d * d_x + d_x * d_prime + v * d_l + d_l * d_prime + 4 * d_prime


# -- bundles -----------------------------------------------------------------

@dataclass
class LogitBundle:
    x_hat: np.ndarray
    source_logits: np.ndarray   # T x v
    label: int = None

    def __post_init__(self):
        self.x_hat = as_real(self.x_hat)
        self.source_logits = as_real(self.source_logits)
        if self.source_logits.ndim != 2:
            raise DimensionError("source_logits must be T x v")
        if self.source_logits.shape[0] == 0:
            raise ConfigError("a bundle needs at least one source (T >= 1)")


@dataclass
class BundleBatch:
    """Many bundles stacked: ``x_hat`` (N, d), ``logits`` (N, T, v)."""
    x_hat: np.ndarray
    logits: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x_hat = as_real(self.x_hat)
        self.logits = as_real(self.logits)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.x_hat.shape[0]
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.int64)
        if self.logits.ndim != 3 or self.logits.shape[0] != n or self.labels.shape != (n,):
            raise DimensionError("bundle batch arrays do not line up")
        if self.logits.shape[1] == 0:
            raise ConfigError("a bundle needs at least one source (T >= 1)")

    def __len__(self):
        return self.x_hat.shape[0]

    @property
    def T(self):
        return self.logits.shape[1]

    def bundle(self, i):
        y = int(self.labels[i])
        return LogitBundle(self.x_hat[i], self.logits[i], None if y < 0 else y)

    def subset(self, idx):
        idx = np.asarray(idx)
        return BundleBatch(self.x_hat[idx], self.logits[idx], self.labels[idx], self.sample_ids[idx])

    def select_sources(self, cols):
        return BundleBatch(self.x_hat, self.logits[:, list(cols)], self.labels, self.sample_ids)

    @classmethod
    def from_bundles(cls, bundles):
        return cls(np.stack([b.x_hat for b in bundles]),
                   np.stack([b.source_logits for b in bundles]),
                   np.array([-1 if b.label is None else b.label for b in bundles]))


def _as_batch(bundle):
    if isinstance(bundle, BundleBatch):
        return bundle, False
    if isinstance(bundle, LogitBundle):
        return BundleBatch.from_bundles([bundle]), True
    raise TypeError(f"expected LogitBundle or BundleBatch, got {type(bundle).__name__}")


def compute_bundles(data, prompts, backbone, verbalizer):
    """Mapped source logits and pooled raw embeddings for every sample."""
    ids, mask = encode_batch(data)
    x_hat = max_pooled_embeddings(ids, mask, backbone)
    logits = np.stack([map_logits(prompt_logits(p, backbone, data), verbalizer) for p in prompts], axis=1)
    labels = np.array([s.label for s in data], dtype=np.int64)
    sids = np.array([s.sample_id for s in data], dtype=np.int64)
    return BundleBatch(x_hat, logits, labels, sids)


# -- attention module forward / backward -----------------------------------

def _dropout_mask(shape, rate, rng):
    if rate <= 0.0:
        return None
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def attention_forward(x_hat, keys, logits, params, training=False, rng=None):
    """Batched forward. ``keys`` (B, T, key_dim) feed the source path.

    Returns ``(weights (B, T), combined (B, v), cache)``.
    """
    d, dx, dl, dp, kd = params.dims
    B, T = logits.shape[:2]
    if T == 0:
        raise ConfigError("no source models (T = 0)")
    if x_hat.shape != (B, d) or keys.shape != (B, T, kd):
        raise DimensionError(
            f"x_hat {x_hat.shape} / keys {keys.shape} do not fit module dims {params.dims}")
    act = params.activation
    rate = params.dropout if training else 0.0
    ux = x_hat @ params.w_dx
    ax = activation(ux, act)
    mx = _dropout_mask(ax.shape, rate, rng)
    ax_d = ax if mx is None else ax * mx
    hx, lnx = layer_norm_forward(ax_d @ params.w_ux, params.lnx_gain, params.lnx_bias)
    ul = keys @ params.w_dl
    al = activation(ul, act)
    ml = _dropout_mask(al.shape, rate, rng)
    al_d = al if ml is None else al * ml
    hl, lnl = layer_norm_forward(al_d @ params.w_ul, params.lnl_gain, params.lnl_bias)
    scores = np.einsum("btk,bk->bt", hl, hx)
    weights = softmax(scores)
    combined = np.einsum("bt,btv->bv", weights, logits)
    cache = dict(x_hat=x_hat, keys=keys, logits=logits, ux=ux, mx=mx, ax_d=ax_d, hx=hx, lnx=lnx,
                 ul=ul, ml=ml, al_d=al_d, hl=hl, lnl=lnl, weights=weights)
    return weights, combined, cache


def attention_backward(gcombined, cache, params):
    """Gradients of the trainable parameters given d loss / d combined."""
    c = cache
    act = params.activation
    d, dx, dl, dp, kd = params.dims
    ga = np.einsum("bv,btv->bt", gcombined, c["logits"])
    gs = softmax_backward(c["weights"], ga)
    ghl = gs[:, :, None] * c["hx"][:, None, :]
    ghx = np.einsum("bt,btk->bk", gs, c["hl"])
    grads = {}
    gzl, grads["lnl_gain"], grads["lnl_bias"] = layer_norm_backward(ghl, c["lnl"])
    grads["w_ul"] = c["al_d"].reshape(-1, dl).T @ gzl.reshape(-1, dp)
    gal = gzl @ params.w_ul.T
    if c["ml"] is not None:
        gal = gal * c["ml"]
    gul = gal * activation_grad(c["ul"], act)
    grads["w_dl"] = c["keys"].reshape(-1, kd).T @ gul.reshape(-1, dl)
    gzx, grads["lnx_gain"], grads["lnx_bias"] = layer_norm_backward(ghx, c["lnx"])
    grads["w_ux"] = c["ax_d"].T @ gzx
    gax = gzx @ params.w_ux.T
    if c["mx"] is not None:
        gax = gax * c["mx"]
    gux = gax * activation_grad(c["ux"], act)
    grads["w_dx"] = c["x_hat"].T @ gux
    return grads


def g_forward(bundle, params, training=False, rng=None):
    """Per-source weights and the combined logit vector.

    Works on a single LogitBundle (returns 1-D arrays) or a BundleBatch.
    """
    batch, single = _as_batch(bundle)
    w, comb, _ = attention_forward(batch.x_hat, batch.logits, batch.logits, params, training, rng)
    return (w[0], comb[0]) if single else (w, comb)


def g_loss_and_grads(batch, targets, params, training=False, rng=None, keys=None):
    keys = batch.logits if keys is None else keys
    _, comb, cache = attention_forward(batch.x_hat, keys, batch.logits, params, training, rng)
    loss, gcomb = cross_entropy(comb, targets)
    return loss, attention_backward(gcomb, cache, params)


@dataclass
class GTrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 80
    batch_size: int = 4  # 0 means full batch
    weight_decay: float = 0.01
    select_on_dev: bool = True


def prompt_keys(prompts, n):
    """Max-pooled prompt rows, broadcast to a (n, T, d) key tensor."""
    pooled = np.stack([max_pool_rows(p.matrix) for p in prompts])
    return np.broadcast_to(pooled, (n,) + pooled.shape)


def g_train(train, verbalizer, params_init, cfg, rng, dev=None, prompts=None, history=None):
    """Fit the attention module on labelled bundles; sources stay frozen.

    ``train`` and ``dev`` are BundleBatch objects whose logits are already
    remapped. With ``prompts`` the module is keyed on max-pooled prompts
    instead of logits (the prompt-keyed ablation). When ``dev`` is given and
    ``cfg.select_on_dev`` is set, the parameters from the epoch with the best
    dev accuracy are returned (earliest epoch on ties, the initial
    parameters count as epoch 0).
    """
    if len(train) == 0:
        raise ConfigError("few-shot episode is empty")
    params = params_init.copy()
    if cfg.epochs == 0:
        return params
    targets = np.array([verbalizer.label_tokens[y] for y in train.labels], dtype=np.int64)
    keys = None if prompts is None else prompt_keys(prompts, len(train))
    opt = AdamW(params.arrays(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    n = len(train)
    bs = cfg.batch_size or n
    select = dev is not None and len(dev) > 0 and cfg.select_on_dev

    def dev_acc(p):
        pred = predict_with(dev, p, verbalizer, prompts)[0]
        return float(np.mean(pred == dev.labels))

    best, best_acc = (params.copy(), dev_acc(params)) if select else (None, -1.0)
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            sub = train.subset(idx)
            loss, grads = g_loss_and_grads(sub, targets[idx], params, training=True, rng=rng,
                                           keys=None if keys is None else keys[idx])
            opt.step(grads)
            total += loss * len(idx)
        if history is not None:
            history.append(total / n)
        if select:
            acc = dev_acc(params)
            if acc > best_acc:
                best, best_acc = params.copy(), acc
    return best if select else params


def predict_with(batch, params, verbalizer, prompts=None):
    """Labels and weights for a batch (inference mode, no dropout)."""
    keys = batch.logits if prompts is None else prompt_keys(prompts, len(batch))
    w, comb, _ = attention_forward(batch.x_hat, keys, batch.logits, params)
    return predict_label(comb, verbalizer), w


def sesom_predict(bundle, params, verbalizer):
    """``(label, weights)`` for a bundle; vectorised over a BundleBatch."""
    batch, single = _as_batch(bundle)
    labels, w = predict_with(batch, params, verbalizer)
    return (int(labels[0]), w[0]) if single else (labels, w)


def hard_variant_predict(bundle, params, verbalizer):
    """Replace the attention weights with a one-hot at their argmax."""
    batch, single = _as_batch(bundle)
    w, _, _ = attention_forward(batch.x_hat, batch.logits, batch.logits, params)
    top = np.argmax(w, axis=1)
    chosen = batch.logits[np.arange(len(batch)), top]
    labels = predict_label(chosen, verbalizer)
    return int(labels[0]) if single else labels


def acc_sp_forward(x_hat, prompts, bundle, params):
    """Prompt-keyed attention: max-pooled prompts replace logits as keys.

    The resulting weights still combine the source logits.
    """
    batch, single = _as_batch(bundle)
    if x_hat is not None:
        batch = BundleBatch(as_real(x_hat).reshape(batch.x_hat.shape), batch.logits, batch.labels)
    if len(prompts) != batch.T:
        raise DimensionError(f"{len(prompts)} prompts for {batch.T} sources")
    keys = prompt_keys(prompts, len(batch))
    w, comb, _ = attention_forward(batch.x_hat, keys, batch.logits, params)
    return (w[0], comb[0]) if single else (w, comb)


# -- baselines ---------------------------------------------------------------

def uniform_ensemble(bundle):
    batch, single = _as_batch(bundle)
    out = batch.logits.mean(axis=1)
    return out[0] if single else out


def fixed_weight_ensemble(bundle, f1_scores):
    """Average source logits with weights proportional to their F1."""
    batch, single = _as_batch(bundle)
    f1 = np.asarray(f1_scores, dtype=np.float64)
    if f1.shape != (batch.T,):
        raise DimensionError(f"need {batch.T} F1 scores, got {f1.shape}")
    if np.any(f1 < 0):
        raise ConfigError("F1 scores must be non-negative")
    total = f1.sum()
    if total == 0.0:
        warnings.warn("all source F1 scores are zero; falling back to uniform weights",
                      RuntimeWarning, stacklevel=2)
        w = np.full(batch.T, 1.0 / batch.T)
    else:
        w = f1 / total
    out = np.einsum("t,btv->bv", w, batch.logits)
    return out[0] if single else out


def source_predictions(bundle, verbalizer):
    """Per-source predicted labels, shape (N, T)."""
    batch, single = _as_batch(bundle)
    preds = predict_label(batch.logits, verbalizer)
    return preds[0] if single else preds


def majority_vote(bundle, verbalizer, rng):
    """Modal per-source prediction; ties drawn uniformly from the tied labels."""
    batch, single = _as_batch(bundle)
    preds = np.ascontiguousarray(predict_label(batch.logits, verbalizer), dtype=np.int64)
    counts = kernels.vote_counts(preds, verbalizer.num_labels)
    out = np.empty(len(batch), dtype=np.int64)
    for i, row in enumerate(counts):
        tied = np.flatnonzero(row == row.max())
        out[i] = tied[0] if len(tied) == 1 else tied[rng.integers(len(tied))]
    return int(out[0]) if single else out


def pseudo_label_generate(prompts, backbone, unlabeled, verbalizer, rng):
    """Label every sample by majority vote of the (adapted) source models."""
    from .backbone import TokenSequence

    batch = compute_bundles(unlabeled, prompts, backbone, verbalizer)
    labels = majority_vote(batch, verbalizer, rng)
    return [TokenSequence(s.token_ids, int(y), s.task_id, s.sample_id, s.region)
            for s, y in zip(unlabeled, labels)]


# -- file I/O ------------------------------------------------------------------

MAGIC = b"SESOMG01"


def save_attention(params, path):
    d, dx, dl, dp, kd = params.dims
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", d, dx, dl, dp, kd))
        fh.write(struct.pack("<d", params.dropout))
        for k in TRAINABLE:
            fh.write(np.ascontiguousarray(getattr(params, k), dtype="<f8").tobytes())


def load_attention(path, act="relu"):
    with open(path, "rb") as fh:
        buf = fh.read()
    off = read_magic(buf, MAGIC)
    if len(buf) < off + 28:
        raise FormatError("truncated header", offset=len(buf))
    d, dx, dl, dp, kd = struct.unpack_from("<IIIII", buf, off)
    (rate,) = struct.unpack_from("<d", buf, off + 20)
    off += 28
    shapes = {"w_dx": (d, dx), "w_ux": (dx, dp), "lnx_gain": (dp,), "lnx_bias": (dp,),
              "w_dl": (kd, dl), "w_ul": (dl, dp), "lnl_gain": (dp,), "lnl_bias": (dp,)}
    arrays = {}
    for k in TRAINABLE:
        flat, off = read_block(buf, off, int(np.prod(shapes[k])), k)
        arrays[k] = flat.reshape(shapes[k])
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", offset=off)
    return AttentionModuleParams(**arrays, dropout=rate, activation=act)
