"""Soft prompts and prompt tuning against the frozen backbone."""
import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .backbone import encode_batch, forward_batch, loss_and_grads, read_block, read_magic
from .errors import ConfigError, DimensionError, FormatError
from .numerics import as_real, check_finite, cosine_similarity, make_rng
from .optim import AdamW
from .verbalizer import map_logits, predict_label


@dataclass
class SoftPrompt:
    task_id: str
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = as_real(self.matrix)
        if self.matrix.ndim != 2 or 0 in self.matrix.shape:
            raise DimensionError(f"prompt matrix must be m x d with m, d >= 1, got {self.matrix.shape}")
        check_finite(self.matrix, "prompt")

    @property
    def m(self):
        return self.matrix.shape[0]

    @property
    def d(self):
        return self.matrix.shape[1]

    def copy(self, task_id=None):
        return SoftPrompt(self.task_id if task_id is None else task_id, self.matrix.copy())

    def fingerprint(self):
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


@dataclass
class TuneConfig:
    learning_rate: float = 3e-1
    epochs: int = 10
    batch_size: int = 32  # 0 means full batch
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 0:
            raise ConfigError("batch_size must be non-negative")


def init_prompt(m, d, rng, scheme="vocab_rows", embed_table=None, task_id=""):
    """Random soft prompt.

    ``vocab_rows`` copies ``m`` distinct rows of ``embed_table``;
    ``gaussian`` draws entries from N(0, 0.5**2).
    """
    if m < 1:
        raise ConfigError("prompt length m must be >= 1")
    if scheme == "gaussian":
        return SoftPrompt(task_id, rng.normal(0.0, 0.5, size=(m, d)))
    if scheme == "vocab_rows":
        if embed_table is None:
            raise ConfigError("vocab_rows initialisation needs the embedding table")
        v, width = embed_table.shape
        if width != d:
            raise DimensionError(f"embedding width {width} != prompt width {d}")
        if m > v:
            raise ConfigError(f"cannot draw {m} distinct rows from a vocabulary of {v}")
        rows = rng.choice(v, size=m, replace=False)
        return SoftPrompt(task_id, np.array(embed_table[rows], dtype=np.float64))
    raise ConfigError(f"unknown prompt init scheme {scheme!r}")


def label_targets(data, verbalizer):
    labels = [s.label for s in data]
    for y in labels:
        if not 0 <= y < verbalizer.num_labels:
            raise ConfigError(f"label {y} has no verbalizer entry")
    return np.array([verbalizer.label_tokens[y] for y in labels], dtype=np.int64)


def prompt_tune(prompt, backbone, data, verbalizer, cfg, rng=None, history=None):
    """Tune ``prompt`` on ``data`` with the backbone frozen.

    Returns a new SoftPrompt; the input prompt is left untouched. The loss
    is full-vocabulary cross-entropy against each label's verbalizer token.
    Epoch-average training losses are appended to ``history`` if given.
    """
    if not backbone.frozen:
        raise ConfigError("prompt tuning requires a frozen backbone")
    if prompt.d != backbone.d:
        raise DimensionError(f"prompt width {prompt.d} != backbone width {backbone.d}")
    out = prompt.copy()
    if cfg.epochs == 0 or not data:
        return out
    targets = label_targets(data, verbalizer)
    ids, mask = encode_batch(data)
    if rng is None:
        rng = make_rng(cfg.seed, "prompt_tune", prompt.task_id)
    P = out.matrix
    opt = AdamW({"P": P}, cfg.learning_rate, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    n = len(data)
    bs = cfg.batch_size or n
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, gP, _ = loss_and_grads(P, ids[idx], mask[idx], targets[idx], backbone)
            opt.step({"P": gP})
            total += loss * len(idx)
        if history is not None:
            history.append(total / n)
    check_finite(P, "tuned prompt")
    return out


def few_shot_adapt(sources, backbone, train, verbalizer, cfg, seed=0, skip=False):
    """Tune every source prompt independently on the target few-shot split.

    With ``skip`` the sources are returned as copies, unchanged. Each source
    draws from its own RNG stream derived from ``seed`` and its position.
    """
    if not train:
        raise ConfigError("few-shot episode is empty")
    if skip:
        return [p.copy() for p in sources]
    return [prompt_tune(p, backbone, train, verbalizer, cfg, rng=make_rng(seed, "adapt", j))
            for j, p in enumerate(sources)]


def spot_t_retrieve(target_prompt, sources):
    """Index of the source prompt most cosine-similar to ``target_prompt``.

    Returns ``(index, similarity)``. Ties go to the lowest index.
    """
    best, best_sim = -1, -np.inf
    for j, src in enumerate(sources):
        if src.matrix.shape != target_prompt.matrix.shape:
            raise DimensionError(
                f"source {j} has shape {src.matrix.shape}, target has {target_prompt.matrix.shape}")
        sim = cosine_similarity(target_prompt.matrix, src.matrix)
        if sim > best_sim:
            best, best_sim = j, sim
    if best < 0:
        raise ConfigError("no source prompts to retrieve from")
    return best, best_sim


def spot_t(sources, backbone, train, verbalizer, cfg, warmup_epochs=3, seed=0, init="vocab_rows"):
    """Warm up a fresh target prompt, retrieve the closest source, re-tune it.

    Returns ``(tuned_prompt, retrieved_index)``.
    """
    m, d = sources[0].matrix.shape
    rng = make_rng(seed, "spot_t", "init")
    warm = init_prompt(m, d, rng, init, backbone.embed, task_id="target")
    warm = prompt_tune(warm, backbone, train, verbalizer, replace(cfg, epochs=warmup_epochs),
                       rng=make_rng(seed, "spot_t", "warmup"))
    idx, _ = spot_t_retrieve(warm, sources)
    start = sources[idx].copy(task_id="target")
    tuned = prompt_tune(start, backbone, train, verbalizer, cfg, rng=make_rng(seed, "spot_t", "tune"))
    return tuned, idx


def prompt_logits(prompt, backbone, data, chunk=512):
    """Raw (unmapped) logits of the source model ``[prompt; backbone]`` on ``data``."""
    ids, mask = encode_batch(data)
    out = np.empty((len(data), backbone.v))
    for s in range(0, len(data), chunk):
        out[s:s + chunk] = forward_batch(prompt.matrix, ids[s:s + chunk], mask[s:s + chunk], backbone)
    return out


def prompt_predict(prompt, backbone, data, verbalizer):
    return predict_label(map_logits(prompt_logits(prompt, backbone, data), verbalizer), verbalizer)


# -- prompt file I/O ---------------------------------------------------------

MAGIC = b"SESOMSP1"


def save_prompt(prompt, path):
    tid = prompt.task_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", prompt.m, prompt.d))
        fh.write(struct.pack("<I", len(tid)))
        fh.write(tid)
        fh.write(np.ascontiguousarray(prompt.matrix, dtype="<f8").tobytes())


def load_prompt(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    off = read_magic(buf, MAGIC)
    if len(buf) < off + 12:
        raise FormatError("truncated header", offset=len(buf))
    m, d, n = struct.unpack_from("<III", buf, off)
    off += 12
    if off + n > len(buf):
        raise FormatError("truncated task id", offset=len(buf))
    try:
        task_id = buf[off:off + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("task id is not valid UTF-8", offset=off) from exc
    off += n
    flat, off = read_block(buf, off, m * d, "prompt matrix")
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", offset=off)
    return SoftPrompt(task_id, flat.reshape(m, d))
