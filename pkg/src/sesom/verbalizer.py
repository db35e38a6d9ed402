"""Label/token verbalizers and pre-softmax logit remapping.

A remap ``{k: t}`` pairs a source-side token ``k`` with the target token
``t``; remapping writes ``min`` of the pair to ``k`` and ``max`` to ``t``,
so whichever of the two tokens the source model preferred ends up scored
on the target's token.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, InvalidMapError


def _first_token(verbalizer):
    if isinstance(verbalizer, (int, np.integer)):
        return int(verbalizer)
    seq = tuple(verbalizer)
    if not seq:
        raise ConfigError("empty verbalizer")
    return int(seq[0])


def validate_remap(remap):
    keys = set(remap)
    vals = list(remap.values())
    if len(set(vals)) != len(vals):
        raise InvalidMapError("remap is not injective")
    overlap = keys & set(vals)
    if overlap:
        raise InvalidMapError(f"remap keys and values overlap on {sorted(overlap)}")


@dataclass(frozen=True)
class VerbalizerMap:
    label_tokens: tuple
    remap: dict = field(default_factory=dict)

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.label_tokens)
        if not tokens:
            raise ConfigError("a verbalizer needs at least one label")
        if len(set(tokens)) != len(tokens):
            raise ConfigError(f"label tokens must be distinct, got {tokens}")
        remap = {int(k): int(v) for k, v in dict(self.remap).items()}
        validate_remap(remap)
        object.__setattr__(self, "label_tokens", tokens)
        object.__setattr__(self, "remap", remap)

    @property
    def num_labels(self):
        return len(self.label_tokens)

    def token_for(self, label):
        try:
            return self.label_tokens[label]
        except IndexError:
            raise ConfigError(f"label {label} has no verbalizer entry") from None

    def pair_arrays(self):
        keys = np.array(sorted(self.remap), dtype=np.int64)
        vals = np.array([self.remap[k] for k in keys], dtype=np.int64)
        return keys, vals


def map_logits(logits, vmap):
    """Apply the pairwise min/max remap to one logit vector or a batch.

    Positions outside every pair are copied unchanged. The input is not
    modified.
    """
    if isinstance(vmap, dict):
        validate_remap(vmap)
        vmap = VerbalizerMap(label_tokens=(0,), remap=vmap) if vmap else None
    x = np.ascontiguousarray(logits, dtype=np.float64)
    if vmap is None or not vmap.remap:
        return x.copy()
    keys, vals = vmap.pair_arrays()
    v = x.shape[-1]
    if keys.max() >= v or vals.max() >= v:
        raise IndexError(f"remap index out of range for vocabulary of {v}")
    flat = x.reshape(-1, v)
    return kernels.map_logits_rows(flat, keys, vals).reshape(x.shape)


def predict_label(mapped_logits, vmap):
    """Argmax restricted to the label tokens; ties go to the lowest label.

    Accepts a single vector or a (..., v) batch.
    """
    x = np.asarray(mapped_logits, dtype=np.float64)
    scores = x[..., list(vmap.label_tokens)]
    out = np.argmax(scores, axis=-1)
    return int(out) if out.ndim == 0 else out


def build_map(source_verbalizers, target_verbalizers):
    """Pair source first-tokens with target first-tokens label by label.

    Each argument is a sequence indexed by label whose items are token ids
    or token-id sequences (only the first token is used). Identity pairs
    are dropped.
    """
    src = [_first_token(v) for v in source_verbalizers]
    tgt = [_first_token(v) for v in target_verbalizers]
    if len(src) != len(tgt):
        raise ConfigError(f"source has {len(src)} labels, target has {len(tgt)}")
    for name, toks in (("source", src), ("target", tgt)):
        if len(set(toks)) != len(toks):
            raise ConfigError(f"ambiguous first-token collision among {name} verbalizers: {toks}")
    remap = {s: t for s, t in zip(src, tgt) if s != t}
    return VerbalizerMap(label_tokens=tuple(tgt), remap=remap)
