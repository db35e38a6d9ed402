"""Tiny frozen encoder standing in for the pretrained language model.

One pre-norm transformer block (single-head self-attention, then a
position-wise MLP, each wrapped in a residual with layer norm in front),
mean pooling over the valid rows, and a linear head onto the vocabulary.
There are no positional embeddings, so the input is treated as a bag of
tokens. The logits are those of the single decision token.
"""
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, VersionError
from .numerics import (activation, activation_grad, as_real, cross_entropy, layer_norm_backward,
                       layer_norm_forward, make_rng, softmax, softmax_backward)
from .optim import AdamW

MLP_ACT = "gelu"
MASK_NEG = -1e30

# declaration order == checkpoint order
PARAM_NAMES = ("embed", "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo",
               "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2", "head")


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple
    label: int
    task_id: str = ""
    sample_id: int = 0
    region: int = -1

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if len(self.token_ids) == 0:
            raise ConfigError("token sequence must have at least one token")


@dataclass
class BackboneParams:
    embed: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    head: np.ndarray
    frozen: bool = field(default=False)

    @property
    def v(self):
        return self.embed.shape[0]

    @property
    def d(self):
        return self.embed.shape[1]

    def arrays(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def freeze(self):
        for a in self.arrays().values():
            a.setflags(write=False)
        self.frozen = True
        return self

    def copy(self):
        return BackboneParams(**{k: np.array(a, copy=True) for k, a in self.arrays().items()})

    def fingerprint(self):
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


def shapes_for(v, d):
    return {
        "embed": (v, d), "ln1_gain": (d,), "ln1_bias": (d,),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ln2_gain": (d,), "ln2_bias": (d,),
        "w1": (d, 4 * d), "b1": (4 * d,), "w2": (4 * d, d), "b2": (d,),
        "head": (d, v),
    }


def init_backbone(v, d, rng):
    def normal(shape, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    return BackboneParams(
        embed=rng.normal(0.0, 1.0, size=(v, d)),
        ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
        wq=normal((d, d), d), wk=normal((d, d), d), wv=normal((d, d), d), wo=normal((d, d), d),
        ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
        w1=normal((d, 4 * d), d), b1=np.zeros(4 * d),
        w2=normal((4 * d, d), 4 * d), b2=np.zeros(d),
        head=normal((d, v), d),
    )


def zeros_backbone(v, d):
    return BackboneParams(**{k: np.zeros(s) for k, s in shapes_for(v, d).items()})


# -- inputs ----------------------------------------------------------------

def encode_batch(seqs):
    """Pad a list of TokenSequence into ``(ids, mask)`` of shape (B, L)."""
    L = max(len(s.token_ids) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        n = len(s.token_ids)
        ids[i, :n] = s.token_ids
        mask[i, :n] = 1.0
    return ids, mask


def embed(tokens, params):
    """Token embeddings for one sequence, as an ``l x d`` matrix."""
    ids = np.asarray(tokens.token_ids if isinstance(tokens, TokenSequence) else tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= params.v):
        raise IndexError(f"token id out of vocabulary range [0, {params.v})")
    return params.embed[ids]


def max_pooled_embeddings(ids, mask, params):
    """Per-sample max-pool over the raw (unprompted) token embeddings."""
    E = params.embed[ids]
    E = np.where(mask[:, :, None] > 0, E, -np.inf)
    return E.max(axis=1)


# -- forward / backward ------------------------------------------------------

def _check_ids(ids, v):
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of vocabulary range [0, {v})")


def block_forward(Z0, mask, params):
    """Run the encoder block on a padded batch ``Z0`` (B, n, d).

    Returns the logits (B, v) and a cache for ``block_backward``.
    """
    B, n, d = Z0.shape
    if d != params.d:
        raise DimensionError(f"input width {d} != model width {params.d}")
    H1, ln1 = layer_norm_forward(Z0, params.ln1_gain, params.ln1_bias)
    Q = H1 @ params.wq
    K = H1 @ params.wk
    V = H1 @ params.wv
    scale = 1.0 / np.sqrt(d)
    S = np.einsum("bid,bjd->bij", Q, K) * scale
    S = S + np.where(mask[:, None, :] > 0, 0.0, MASK_NEG)
    A = softmax(S)
    O = A @ V
    Z1 = Z0 + O @ params.wo
    H2, ln2 = layer_norm_forward(Z1, params.ln2_gain, params.ln2_bias)
    U = H2 @ params.w1 + params.b1
    G = activation(U, MLP_ACT)
    Z2 = Z1 + G @ params.w2 + params.b2
    w = mask / mask.sum(axis=1, keepdims=True)
    pooled = np.einsum("bn,bnd->bd", w, Z2)
    logits = pooled @ params.head
    cache = dict(Z0=Z0, H1=H1, ln1=ln1, Q=Q, K=K, V=V, A=A, O=O, ln2=ln2, H2=H2, U=U, G=G,
                 w=w, pooled=pooled, scale=scale)
    return logits, cache


def block_backward(glogits, cache, params, param_grads=True):
    """Backprop ``glogits`` (B, v) through ``block_forward``.

    Returns ``(gZ0, grads)`` where ``grads`` maps parameter names to
    gradients (empty when ``param_grads`` is false; the embedding gradient
    is left to the caller, which knows the token ids).
    """
    c = cache
    grads = {}
    gpooled = glogits @ params.head.T
    gZ2 = c["w"][:, :, None] * gpooled[:, None, :]
    # MLP branch
    gG = gZ2 @ params.w2.T
    gU = gG * activation_grad(c["U"], MLP_ACT)
    gH2 = gU @ params.w1.T
    gZ1_ln, gg2, gb2 = layer_norm_backward(gH2, c["ln2"])
    gZ1 = gZ2 + gZ1_ln
    # attention branch
    gO = gZ1 @ params.wo.T
    gA = gO @ np.swapaxes(c["V"], 1, 2)
    gV = np.swapaxes(c["A"], 1, 2) @ gO
    gS = softmax_backward(c["A"], gA) * c["scale"]
    gQ = gS @ c["K"]
    gK = np.swapaxes(gS, 1, 2) @ c["Q"]
    gH1 = gQ @ params.wq.T + gK @ params.wk.T + gV @ params.wv.T
    gZ0_ln, gg1, gb1 = layer_norm_backward(gH1, c["ln1"])
    gZ0 = gZ1 + gZ0_ln
    if param_grads:
        d = params.d
        H1 = c["H1"].reshape(-1, d)
        H2 = c["H2"].reshape(-1, d)
        grads["head"] = c["pooled"].T @ glogits
        grads["w2"] = c["G"].reshape(-1, 4 * d).T @ gZ2.reshape(-1, d)
        grads["b2"] = gZ2.sum(axis=(0, 1))
        grads["w1"] = H2.T @ gU.reshape(-1, 4 * d)
        grads["b1"] = gU.sum(axis=(0, 1))
        grads["ln2_gain"], grads["ln2_bias"] = gg2, gb2
        grads["wo"] = c["O"].reshape(-1, d).T @ gZ1.reshape(-1, d)
        grads["wq"] = H1.T @ gQ.reshape(-1, d)
        grads["wk"] = H1.T @ gK.reshape(-1, d)
        grads["wv"] = H1.T @ gV.reshape(-1, d)
        grads["ln1_gain"], grads["ln1_bias"] = gg1, gb1
    return gZ0, grads


def assemble_input(prompt_matrix, ids, mask, params):
    """Build ``[P; X]`` for a batch plus its row mask."""
    _check_ids(ids, params.v)
    X = params.embed[ids]
    if prompt_matrix is None:
        return X, mask
    P = as_real(prompt_matrix)
    if P.ndim != 2 or P.shape[1] != params.d:
        raise DimensionError(f"prompt must be m x {params.d}, got {P.shape}")
    B = ids.shape[0]
    Z0 = np.concatenate([np.broadcast_to(P, (B,) + P.shape), X], axis=1)
    full_mask = np.concatenate([np.ones((B, P.shape[0])), mask], axis=1)
    return Z0, full_mask


def forward_batch(prompt_matrix, ids, mask, params):
    Z0, m = assemble_input(prompt_matrix, ids, mask, params)
    logits, _ = block_forward(Z0, m, params)
    return logits


def forward(prompt, X, params):
    """Logits for one prompt-prefixed sequence.

    ``prompt`` is a SoftPrompt, an ``m x d`` matrix or None; ``X`` is the
    ``l x d`` embedded input.
    """
    P = getattr(prompt, "matrix", prompt)
    X = as_real(X)
    if X.ndim != 2 or X.shape[1] != params.d:
        raise DimensionError(f"X must be l x {params.d}, got {X.shape}")
    if P is not None:
        P = as_real(P)
        if P.ndim != 2 or P.shape[1] != params.d:
            raise DimensionError(f"prompt must be m x {params.d}, got {P.shape}")
        Z0 = np.vstack([P, X])
    else:
        Z0 = X
    logits, _ = block_forward(Z0[None], np.ones((1, Z0.shape[0])), params)
    return logits[0]


def loss_and_grads(prompt_matrix, ids, mask, targets, params, param_grads=False):
    """Mean cross-entropy of ``targets`` and its gradients.

    Returns ``(loss, g_prompt, grads)``; ``g_prompt`` is None when there is
    no prompt. With ``param_grads`` the backbone gradients (embedding
    included) are returned in ``grads``.
    """
    Z0, m = assemble_input(prompt_matrix, ids, mask, params)
    logits, cache = block_forward(Z0, m, params)
    loss, glogits = cross_entropy(logits, targets)
    gZ0, grads = block_backward(glogits, cache, params, param_grads)
    n_prompt = 0 if prompt_matrix is None else np.shape(prompt_matrix)[0]
    g_prompt = gZ0[:, :n_prompt].sum(axis=0) if n_prompt else None
    if param_grads:
        gE = np.zeros_like(params.embed)
        np.add.at(gE, ids.ravel(), (gZ0[:, n_prompt:] * mask[:, :, None]).reshape(-1, params.d))
        grads["embed"] = gE
    return loss, g_prompt, grads


# -- pretraining -------------------------------------------------------------

@dataclass
class PretrainConfig:
    v: int = 512
    d: int = 32
    epochs: int = 8
    learning_rate: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0


def pretrain_backbone(corpus, cfg, rng=None, history=None):
    """Train every backbone parameter on ``corpus`` by cross-entropy.

    Each sample's target is the vocabulary token stored as its ``label``.
    The returned params are frozen. Epoch-average losses are appended to
    ``history`` when given; entry 0 is the loss of the initialisation.
    """
    if not corpus:
        raise ConfigError("pretraining corpus is empty")
    if rng is None:
        rng = make_rng(cfg.seed, "pretrain")
    params = init_backbone(cfg.v, cfg.d, rng)
    arrays = params.arrays()
    opt = AdamW(arrays, cfg.learning_rate, weight_decay=cfg.weight_decay)
    ids, mask = encode_batch(corpus)
    targets = np.array([s.label for s in corpus], dtype=np.int64)
    n = len(corpus)
    if history is not None:
        history.append(_corpus_loss(params, ids, mask, targets))
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, _, grads = loss_and_grads(None, ids[idx], mask[idx], targets[idx], params,
                                            param_grads=True)
            opt.step(grads)
            total += loss * len(idx)
        if history is not None:
            history.append(total / n)
    return params.freeze()


def _corpus_loss(params, ids, mask, targets, chunk=1024):
    total = 0.0
    for s in range(0, len(targets), chunk):
        logits = forward_batch(None, ids[s:s + chunk], mask[s:s + chunk], params)
        loss, _ = cross_entropy(logits, targets[s:s + chunk])
        total += loss * len(logits)
    return total / len(targets)


# -- checkpoint I/O ----------------------------------------------------------

MAGIC = b"SESOMBB1"


def save_backbone(params, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", params.v, params.d))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def read_magic(buf, magic):
    if len(buf) < len(magic):
        raise FormatError("file too short for magic header", offset=len(buf))
    head = bytes(buf[:len(magic)])
    if head != magic:
        if head[:-1] == magic[:-1]:
            raise VersionError(
                f"unsupported format version {head[-1:]!r}, expected {magic[-1:]!r}", offset=len(magic) - 1)
        raise FormatError(f"bad magic {head!r}, expected {magic!r}", offset=0)
    return len(magic)


def read_block(buf, offset, count, what):
    nbytes = 8 * count
    if offset + nbytes > len(buf):
        raise FormatError(f"truncated while reading {what}", offset=len(buf))
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64), offset + nbytes


def load_backbone(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    off = read_magic(buf, MAGIC)
    if len(buf) < off + 8:
        raise FormatError("truncated header", offset=len(buf))
    v, d = struct.unpack_from("<II", buf, off)
    off += 8
    arrays = {}
    for name, shape in shapes_for(v, d).items():
        flat, off = read_block(buf, off, int(np.prod(shape)), name)
        arrays[name] = flat.reshape(shape)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", offset=off)
    return BackboneParams(**arrays).freeze()
