"""Synthetic tasks, few-shot episodes and the logit-dump exchange format.

Token sequences are bags of abstract token ids. A task labels a sequence
by which label's feature tokens it contains; other tokens are fillers or
distractors borrowed from other tasks' rules with random labels. Targets
can be mixtures of region tasks, each region readable only through one
source task's features.
"""
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .backbone import TokenSequence, read_block, read_magic
from .errors import ConfigError, FormatError
from .numerics import make_rng


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    label_features: tuple          # per label: feature token ids voting for it
    verbalizer: tuple              # per label: verbalizer token id
    length: tuple = (12, 12)       # inclusive (min, max) sequence length
    signal_count: int = 2
    cue_tokens: tuple = ()
    cue_count: int = 0             # cue tokens drawn per sample; 0 means all of them
    distractor_sets: tuple = ()    # other rules, each a per-label tuple of token sets
    distractor_count: int = 0
    filler: tuple = ()
    distractor_width: int = 1      # tokens per chosen distractor set, all voting one random label
    label_probs: tuple = None
    feature_weights: tuple = None  # optional ((token, weight), ...)
    reference: str = None
    feature_overlap: float = None

    def __post_init__(self):
        if self.num_labels < 2:
            raise ConfigError(f"{self.task_id}: a task needs at least 2 labels")
        if len(self.verbalizer) != self.num_labels:
            raise ConfigError(f"{self.task_id}: one verbalizer token per label required")
        if len(set(self.verbalizer)) != len(self.verbalizer):
            raise ConfigError(f"{self.task_id}: verbalizer tokens must be distinct")
        if any(len(f) == 0 for f in self.label_features):
            raise ConfigError(f"{self.task_id}: every label needs feature tokens")
        lo, hi = self.length
        if not 1 <= lo <= hi:
            raise ConfigError(f"{self.task_id}: bad length range {self.length}")
        if self.structural_count() > lo:
            raise ConfigError(f"{self.task_id}: {self.structural_count()} structural tokens exceed "
                              f"the minimum length {lo}")
        if self.distractor_count > len(self.distractor_sets):
            raise ConfigError(f"{self.task_id}: not enough distractor sets")
        if self.structural_count() < hi and not self.filler:
            raise ConfigError(f"{self.task_id}: filler pool needed to pad sequences")
        if self.label_probs is not None:
            p = np.asarray(self.label_probs, dtype=float)
            if p.shape != (self.num_labels,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ConfigError(f"{self.task_id}: label_probs must be a distribution")

    @property
    def num_labels(self):
        return len(self.label_features)

    def structural_count(self):
        cues = self.cue_count or len(self.cue_tokens)
        return self.signal_count + cues + self.distractor_count * self.distractor_width

    def weights(self):
        return dict(self.feature_weights or ())


@dataclass(frozen=True)
class MixtureSpec:
    """A target whose samples come from one of several region tasks."""
    task_id: str
    components: tuple
    shares: tuple

    def __post_init__(self):
        if len(self.components) != len(self.shares) or not self.components:
            raise ConfigError("one share per mixture component required")
        if not np.isclose(sum(self.shares), 1.0) or min(self.shares) < 0:
            raise ConfigError("mixture shares must form a distribution")
        first = self.components[0]
        for c in self.components[1:]:
            if c.verbalizer != first.verbalizer:
                raise ConfigError("mixture components must share a verbalizer")

    @property
    def num_labels(self):
        return self.components[0].num_labels

    @property
    def verbalizer(self):
        return self.components[0].verbalizer


def label_rule(spec, token_ids):
    """Known labelling rule: argmax of weighted feature presence, ties low."""
    w = spec.weights()
    toks = list(token_ids)
    scores = [sum(w.get(t, 1.0) for t in toks if t in set(feats)) for feats in spec.label_features]
    return int(np.argmax(scores))


def _draw(rng, pool, k):
    pool = np.asarray(pool)
    return rng.choice(pool, size=k, replace=k > len(pool))


def _sample_one(spec, rng):
    p = None if spec.label_probs is None else np.asarray(spec.label_probs, dtype=float)
    y = int(rng.choice(spec.num_labels, p=p))
    toks = list(_draw(rng, spec.label_features[y], spec.signal_count))
    if spec.cue_tokens:
        toks += list(_draw(rng, spec.cue_tokens, spec.cue_count) if spec.cue_count
                     else spec.cue_tokens)
    if spec.distractor_count:
        for s in rng.choice(len(spec.distractor_sets), size=spec.distractor_count, replace=False):
            dset = spec.distractor_sets[s]
            toks += list(_draw(rng, dset[rng.integers(len(dset))], spec.distractor_width))
    lo, hi = spec.length
    L = int(rng.integers(lo, hi + 1))
    if L > len(toks):
        toks += list(rng.choice(spec.filler, size=L - len(toks)))
    toks = [int(t) for t in toks]
    rng.shuffle(toks)
    return toks, y


def gen_task(spec, n, rng, start_id=0):
    """Draw ``n`` i.i.d. samples from a TaskSpec or MixtureSpec."""
    if n < spec.num_labels:
        raise ConfigError(f"need at least {spec.num_labels} samples, asked for {n}")
    out = []
    if isinstance(spec, MixtureSpec):
        regions = rng.choice(len(spec.components), size=n, p=np.asarray(spec.shares, dtype=float))
        for i, r in enumerate(regions):
            toks, y = _sample_one(spec.components[r], rng)
            out.append(TokenSequence(toks, y, spec.task_id, start_id + i, int(r)))
        return out
    for i in range(n):
        toks, y = _sample_one(spec, rng)
        out.append(TokenSequence(toks, y, spec.task_id, start_id + i))
    return out


def with_overlap(reference, task_id, overlap, fresh_pool, rng, set_size=None):
    """Derive a task whose label features share ``overlap`` of ``reference``'s.

    For each label, ``round(overlap * set_size)`` tokens come from the
    reference feature set and the rest from ``fresh_pool`` (unused tokens).
    """
    if not 0.0 <= overlap <= 1.0:
        raise ConfigError("overlap must lie in [0, 1]")
    set_size = set_size or len(reference.label_features[0])
    n_shared = int(round(overlap * set_size))
    n_fresh = set_size - n_shared
    pool = [t for t in fresh_pool if all(t not in f for f in reference.label_features)]
    if any(n_shared > len(f) for f in reference.label_features):
        raise ConfigError(f"overlap {overlap} needs {n_shared} shared tokens per label; "
                          f"the reference has fewer")
    if n_fresh * reference.num_labels > len(pool):
        raise ConfigError(f"fresh pool of {len(pool)} tokens too small for {n_fresh} per label")
    pool = list(rng.permutation(pool))
    feats = []
    for f in reference.label_features:
        shared = [int(t) for t in rng.permutation(list(f))[:n_shared]]
        fresh, pool = pool[:n_fresh], pool[n_fresh:]
        feats.append(tuple(sorted(shared + [int(t) for t in fresh])))
    return replace(reference, task_id=task_id, label_features=tuple(feats),
                   reference=reference.task_id, feature_overlap=float(overlap))


# -- episodes ----------------------------------------------------------------

@dataclass
class FewShotEpisode:
    train: list
    dev: list
    test: list
    seed: int


def _stratified(rng, pool_idx, labels, k, num_labels):
    """Pick ``k`` indices from ``pool_idx``, balanced when ``k`` divides evenly."""
    if k % num_labels == 0:
        per = k // num_labels
        chosen = []
        for c in range(num_labels):
            cand = pool_idx[labels[pool_idx] == c]
            if len(cand) < per:
                raise ConfigError(f"not enough samples of label {c} for a {k}-shot split")
            chosen.extend(rng.choice(cand, size=per, replace=False))
        return np.array(sorted(chosen), dtype=np.int64)
    return np.sort(rng.choice(pool_idx, size=k, replace=False))


def sample_episode(dataset, k, seed, test=None, num_labels=None):
    """k-shot train and dev splits, plus the held-out test set.

    Without ``test`` the test split is whatever remains of ``dataset``.
    Train and dev are stratified by label when ``k`` is divisible by the
    number of labels.
    """
    num_labels = num_labels or (max(s.label for s in dataset) + 1)
    need = 2 * k + (0 if test is not None else 1)
    if len(dataset) < need:
        raise ConfigError(f"dataset of {len(dataset)} too small for a {k}-shot episode")
    rng = make_rng(seed, "episode", k)
    labels = np.array([s.label for s in dataset])
    pool = np.arange(len(dataset))
    tr = _stratified(rng, pool, labels, k, num_labels)
    pool = np.setdiff1d(pool, tr)
    dv = _stratified(rng, pool, labels, k, num_labels)
    if test is None:
        rest = np.setdiff1d(pool, dv)
        test = [dataset[i] for i in rest]
    return FewShotEpisode([dataset[i] for i in tr], [dataset[i] for i in dv], list(test), seed)


# -- reference suite -----------------------------------------------------------

@dataclass
class SuiteConfig:
    """Vocabulary layout and generators for the reference synthetic suite.

    Token layout: verbalizers in [0, 16), group selectors from 16, group
    feature tokens from 32 (``tokens_per_label`` per label per group),
    region markers from 128, fillers above ``filler_start``.
    """
    v: int = 512
    n_groups: int = 8
    n_sources: int = 6
    tokens_per_label: int = 6
    length: int = 12
    signal_count: int = 2
    distractor_count: int = 3
    region_shares: tuple = (0.4, 0.3, 0.2, 0.1)
    markers_per_region: int = 7
    marker_count: int = 7
    target_length: int = 12
    target_distractors: int = 3
    target_distractor_width: int = 1
    style_b_sources: tuple = (3, 4, 5)
    filler_start: int = 128
    base_size: int = 12000
    source_size: int = 2000
    target_pool: int = 600
    test_size: int = 2000
    seed: int = 0

    STYLE_A = (0, 1)   # "False" / "True"
    STYLE_B = (2, 3)   # "0" / "1"

    def __post_init__(self):
        if self.n_sources > self.n_groups:
            raise ConfigError("more sources than feature groups")
        if len(self.region_shares) > self.n_sources:
            raise ConfigError("every target region needs a source")
        if 32 + self.n_groups * 2 * self.tokens_per_label > 128:
            raise ConfigError("feature groups overflow the reserved token range")
        if 128 + len(self.region_shares) * self.markers_per_region > self.v:
            raise ConfigError("vocabulary too small for the region markers")

    def selector(self, g):
        return 16 + g

    def group_features(self, g):
        base = 32 + g * 2 * self.tokens_per_label
        return tuple(tuple(range(base + c * self.tokens_per_label, base + (c + 1) * self.tokens_per_label))
                     for c in range(2))

    def markers(self, r):
        start = 128 + r * self.markers_per_region
        return tuple(range(start, start + self.markers_per_region))

    def filler(self):
        return tuple(range(self.filler_start, self.v))

    def source_verbalizer(self, j):
        return self.STYLE_B if j in self.style_b_sources else self.STYLE_A

    def target_verbalizer(self):
        return self.STYLE_A

    def base_spec(self, g):
        others = tuple(self.group_features(h) for h in range(self.n_groups) if h != g)
        return TaskSpec(f"base{g}", self.group_features(g), self.STYLE_A, (self.length, self.length),
                        self.signal_count, (self.selector(g),), 0, others, self.distractor_count,
                        self.filler())

    def source_spec(self, j):
        others = tuple(self.group_features(h) for h in range(self.n_groups) if h != j)
        return TaskSpec(f"source{j}", self.group_features(j), self.source_verbalizer(j),
                        (self.length, self.length), self.signal_count, (), 0, others,
                        self.distractor_count, self.filler())

    def region_spec(self, r):
        others = tuple(self.group_features(h) for h in range(self.n_sources) if h != r)
        return TaskSpec(f"target.r{r}", self.group_features(r), self.target_verbalizer(),
                        (self.target_length, self.target_length), self.signal_count, self.markers(r),
                        self.marker_count, others, self.target_distractors, self.filler(),
                        self.target_distractor_width)

    def target_spec(self):
        comps = tuple(self.region_spec(r) for r in range(len(self.region_shares)))
        return MixtureSpec("target", comps, tuple(self.region_shares))


def base_corpus(suite, n=None, rng=None):
    """Pretraining corpus: every group, selector present, label as a vocabulary token.

    The target token is drawn from either verbalizer style so the backbone
    learns to score both styles for a label.
    """
    n = n or suite.base_size
    rng = rng if rng is not None else make_rng(suite.seed, "base")
    groups = rng.integers(suite.n_groups, size=n)
    out = []
    for i, g in enumerate(groups):
        toks, y = _sample_one(suite.base_spec(int(g)), rng)
        style = suite.STYLE_A if rng.random() < 0.5 else suite.STYLE_B
        out.append(TokenSequence(toks, style[y], "base", i, int(g)))
    return out


# -- logit dump format ---------------------------------------------------------

DUMP_MAGIC = b"SESOMLD1"


def manifest_path(path):
    return f"{path}.manifest.json"


def save_logit_dump(path, batch, manifest=None):
    """Write a BundleBatch in the binary dump format (plus optional manifest)."""
    n, T, v = batch.logits.shape
    d = batch.x_hat.shape[1]
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<IIII", d, v, T, n))
        for i in range(n):
            fh.write(struct.pack("<Qi", int(batch.sample_ids[i]), int(batch.labels[i])))
            fh.write(np.ascontiguousarray(batch.x_hat[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(batch.logits[i], dtype="<f8").tobytes())
    if manifest is not None:
        with open(manifest_path(path), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)


def load_logit_dump_batch(path):
    from .ensemble import BundleBatch

    with open(path, "rb") as fh:
        buf = fh.read()
    off = read_magic(buf, DUMP_MAGIC)
    if len(buf) < off + 16:
        raise FormatError("truncated dump header", offset=len(buf))
    d, v, T, n = struct.unpack_from("<IIII", buf, off)
    off += 16
    if T == 0:
        raise FormatError("dump declares zero source models", offset=off - 8)
    x_hat = np.empty((n, d))
    logits = np.empty((n, T, v))
    labels = np.empty(n, dtype=np.int64)
    sids = np.empty(n, dtype=np.int64)
    for i in range(n):
        if off + 12 > len(buf):
            raise FormatError(f"record {i}: truncated record header", offset=off)
        sids[i], labels[i] = struct.unpack_from("<Qi", buf, off)
        off += 12
        try:
            x_hat[i], off = read_block(buf, off, d, "x_hat")
            flat, off = read_block(buf, off, T * v, "logits")
        except FormatError as exc:
            raise FormatError(f"record {i}: expected {T} logit vectors of length {v}; {exc}") from exc
        logits[i] = flat.reshape(T, v)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after {n} records", offset=off)
    return BundleBatch(x_hat, logits, labels, sids)


def load_logit_dump(path):
    """List of LogitBundle records from a dump file."""
    batch = load_logit_dump_batch(path)
    return [batch.bundle(i) for i in range(len(batch))]


def load_manifest(path):
    with open(manifest_path(path)) as fh:
        return json.load(fh)
