"""End-to-end experiments: artifacts, per-seed pipelines, metrics, reports.

A :class:`Lab` holds everything shared by all seeds (frozen backbone,
trained source prompts, the target pool and test set). Each seed samples
its own episode, adapts the sources, and evaluates every requested method
on the same adapted logits so methods are compared on identical inputs.
"""
import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from sklearn import metrics as skm

from .backbone import load_backbone, pretrain_backbone, save_backbone
from .config import METRICS, save_config
from .ensemble import (acc_sp_forward, compute_bundles, fixed_weight_ensemble, g_train,
                       hard_variant_predict, init_attention, majority_vote, sesom_predict,
                       source_predictions, uniform_ensemble)
from .errors import ConfigError, DegenerateInputError, LookupFailure, NumericError, SesomError
from .numerics import make_rng
from .prompts import (few_shot_adapt, init_prompt, load_prompt, prompt_predict, prompt_tune,
                      save_prompt, spot_t)
from .tasks import base_corpus, gen_task, sample_episode
from .verbalizer import VerbalizerMap, build_map, predict_label

log = logging.getLogger(__name__)

TASK = "target"
G_METHODS = ("sesom", "hard_variant")


# -- metrics -------------------------------------------------------------------

def compute_metrics(predictions, labels, scheme="accuracy"):
    """Accuracy, binary F1 (label 1 positive) or macro F1."""
    pred = np.asarray(predictions)
    gold = np.asarray(labels)
    if pred.shape != gold.shape:
        raise ConfigError(f"{pred.shape[0] if pred.ndim else 0} predictions for "
                          f"{gold.shape[0] if gold.ndim else 0} labels")
    if pred.size == 0:
        raise ConfigError("cannot score an empty prediction set")
    if scheme == "accuracy":
        return float(skm.accuracy_score(gold, pred))
    if scheme == "f1_binary":
        return float(skm.f1_score(gold, pred, pos_label=1, average="binary", zero_division=0))
    if scheme == "f1_macro":
        return float(skm.f1_score(gold, pred, average="macro", zero_division=0))
    raise ConfigError(f"unknown metric scheme {scheme!r}")


def task_f1(predictions, labels, num_labels):
    scheme = "f1_binary" if num_labels == 2 else "f1_macro"
    return compute_metrics(predictions, labels, scheme)


def pearson(a, b):
    """Product-moment correlation of two equal-length vectors."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError("pearson needs two vectors of equal length")
    if len(x) < 2:
        raise ConfigError("pearson needs at least two points")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise DegenerateInputError("pearson is undefined for a constant input")
    r = stats.pearsonr(x, y)[0]
    return float(np.clip(r, -1.0, 1.0))


def stderr(values):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(np.std(v, ddof=1) / np.sqrt(len(v)))


# -- shared artifacts ----------------------------------------------------------------

def target_map(cfg):
    """Target verbalizer plus the union of every source's remap onto it."""
    tgt = cfg.tokens("target")
    remap = {}
    for j in range(cfg.suite.n_sources):
        part = build_map(cfg.tokens(f"source{j}"), tgt).remap
        for k, v in part.items():
            if remap.get(k, v) != v:
                raise ConfigError(f"sources disagree on where token {k} maps")
            remap[k] = v
    return VerbalizerMap(tgt, remap)


def _digest(*parts):
    blob = json.dumps(parts, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def train_sources(cfg, backbone):
    """Prompt-tune one soft prompt per source task on its own training data."""
    suite, sc = cfg.suite, cfg.sources
    tune = cfg.source_config()
    out = []
    for j in range(suite.n_sources):
        data = gen_task(suite.source_spec(j), suite.source_size, make_rng(suite.seed, "source_data", j))
        p0 = init_prompt(cfg.backbone.prompt_length, backbone.d, make_rng(sc.seed, "source_init", j),
                         sc.init, backbone.embed, task_id=f"source{j}")
        vmap = VerbalizerMap(cfg.tokens(f"source{j}"))
        out.append(prompt_tune(p0, backbone, data, vmap, tune, rng=make_rng(sc.seed, "source_tune", j)))
        log.info("trained source %d", j)
    return out


def obtain_backbone(cfg):
    if cfg.backbone.path:
        return load_backbone(cfg.backbone.path)
    cache = cfg.experiment.cache_dir
    key = _digest(cfg.to_dict()["suite"], cfg.to_dict()["backbone"])
    path = os.path.join(cache, f"backbone-{key}.bin") if cache else None
    if path and os.path.exists(path):
        return load_backbone(path)
    log.info("pretraining backbone")
    bb = pretrain_backbone(base_corpus(cfg.suite), cfg.pretrain_config())
    if path:
        os.makedirs(cache, exist_ok=True)
        save_backbone(bb, path)
    return bb


def obtain_sources(cfg, backbone):
    n = cfg.suite.n_sources
    if cfg.sources.dir:
        return [load_prompt(os.path.join(cfg.sources.dir, f"source{j}.bin")) for j in range(n)]
    cache = cfg.experiment.cache_dir
    d = cfg.to_dict()
    key = _digest(d["suite"], d["backbone"], d["sources"], d["verbalizers"])
    folder = os.path.join(cache, f"sources-{key}") if cache else None
    files = [os.path.join(folder, f"source{j}.bin") for j in range(n)] if folder else []
    if files and all(os.path.exists(f) for f in files):
        return [load_prompt(f) for f in files]
    prompts = train_sources(cfg, backbone)
    if folder:
        os.makedirs(folder, exist_ok=True)
        for p, f in zip(prompts, files):
            save_prompt(p, f)
    return prompts


@dataclass
class Lab:
    cfg: object
    backbone: object
    sources: list
    pool: list
    test: list
    verbalizer: VerbalizerMap


def target_data(cfg):
    suite = cfg.suite
    spec = suite.target_spec()
    pool = gen_task(spec, suite.target_pool, make_rng(suite.seed, "target_pool"))
    test = gen_task(spec, suite.test_size, make_rng(suite.seed, "target_test"), start_id=suite.target_pool)
    return pool, test


def build_lab(cfg, backbone=None, sources=None):
    backbone = backbone if backbone is not None else obtain_backbone(cfg)
    sources = sources if sources is not None else obtain_sources(cfg, backbone)
    if len(sources) != cfg.suite.n_sources:
        raise ConfigError(f"{len(sources)} source prompts for {cfg.suite.n_sources} sources")
    pool, test = target_data(cfg)
    return Lab(cfg, backbone, list(sources), pool, test, target_map(cfg))


# -- per-seed pipeline -----------------------------------------------------------------

@dataclass
class SeedState:
    seed: int
    episode: object
    adapted: list
    train: object
    dev: object
    test: object
    dev_f1: np.ndarray


def prepare_seed(lab, seed, shots=None):
    """Sample the episode, adapt every source and compute all bundles."""
    cfg = lab.cfg
    shots = shots or cfg.experiment.shots
    vm = lab.verbalizer
    ep = sample_episode(lab.pool, shots, seed, test=lab.test, num_labels=vm.num_labels)
    adapted = few_shot_adapt(lab.sources, lab.backbone, ep.train, vm, cfg.adapt_config(), seed=seed,
                             skip=not cfg.experiment.source_adapt)
    tr = compute_bundles(ep.train, adapted, lab.backbone, vm)
    dv = compute_bundles(ep.dev, adapted, lab.backbone, vm)
    te = compute_bundles(ep.test, adapted, lab.backbone, vm)
    sp = source_predictions(dv, vm)
    dev_f1 = np.array([task_f1(sp[:, j], dv.labels, vm.num_labels) for j in range(dv.T)])
    return SeedState(seed, ep, adapted, tr, dv, te, dev_f1)


def top_sources(dev_f1, k):
    """Indices of the ``k`` best sources by few-shot F1 (ties to the lower index), ascending."""
    if k == 0 or k >= len(dev_f1):
        return list(range(len(dev_f1)))
    order = sorted(range(len(dev_f1)), key=lambda j: (-dev_f1[j], j))
    return sorted(order[:k])


@dataclass
class MethodOutput:
    preds: np.ndarray
    weights: np.ndarray = None      # (N, T) per-sample source weights, where defined
    extras: dict = field(default_factory=dict)


def _train_g(lab, state, tr, dv, seed, prompts=None):
    cfg, a = lab.cfg, lab.cfg.attention
    key_dim = lab.backbone.d if prompts is not None else lab.backbone.v
    tag = "acc_sp" if prompts is not None else "g"
    p0 = init_attention(lab.backbone.d, a.d_x, a.d_l, a.d_prime, key_dim, make_rng(seed, tag, "init"),
                        dropout=a.dropout, act=a.activation)
    return g_train(tr, lab.verbalizer, p0, cfg.g_config(), make_rng(seed, tag, "train"), dev=dv,
                   prompts=prompts)


def evaluate_methods(lab, state, cols, methods):
    """Run ``methods`` on the sources ``cols`` of a prepared seed."""
    cfg, vm, seed = lab.cfg, lab.verbalizer, state.seed
    tr, dv, te = (b.select_sources(cols) for b in (state.train, state.dev, state.test))
    prompts = [state.adapted[c] for c in cols]
    dev_f1 = state.dev_f1[cols]
    T, N = len(cols), len(te)
    out = {}
    g = None
    for m in methods:
        if m in G_METHODS and g is None:
            g = _train_g(lab, state, tr, dv, seed)
        if m == "sesom":
            preds, w = sesom_predict(te, g, vm)
            out[m] = MethodOutput(preds, w)
        elif m == "hard_variant":
            preds = hard_variant_predict(te, g, vm)
            w = sesom_predict(te, g, vm)[1]
            out[m] = MethodOutput(preds, np.eye(T)[np.argmax(w, axis=1)])
        elif m == "acc_sp":
            gp = _train_g(lab, state, tr, dv, seed, prompts=prompts)
            w, comb = acc_sp_forward(None, prompts, te, gp)
            out[m] = MethodOutput(predict_label(comb, vm), w)
        elif m == "uniform":
            out[m] = MethodOutput(predict_label(uniform_ensemble(te), vm), np.full((N, T), 1.0 / T))
        elif m == "fixed_weight":
            preds = predict_label(fixed_weight_ensemble(te, dev_f1), vm)
            w = dev_f1 / dev_f1.sum() if dev_f1.sum() > 0 else np.full(T, 1.0 / T)
            out[m] = MethodOutput(preds, np.tile(w, (N, 1)))
        elif m == "majority_vote":
            out[m] = MethodOutput(majority_vote(te, vm, make_rng(seed, "vote")))
        elif m == "single_source":
            best = int(np.argmax(dev_f1))
            preds = source_predictions(te, vm)[:, best]
            out[m] = MethodOutput(preds, np.tile(np.eye(T)[best], (N, 1)), {"source": cols[best]})
        elif m == "spot_t":
            plain = [lab.sources[c] for c in cols]
            tuned, idx = spot_t(plain, lab.backbone, state.episode.train, vm, cfg.adapt_config(),
                                warmup_epochs=cfg.spot_t.warmup_epochs, seed=seed,
                                init=cfg.sources.init)
            preds = prompt_predict(tuned, lab.backbone, state.episode.test, vm)
            out[m] = MethodOutput(preds, extras={"retrieved": cols[idx]})
        elif m == "pseudo_label":
            out[m] = _pseudo_label(lab, state, prompts)
        else:
            raise ConfigError(f"unknown method {m!r}")
    return out


def _pseudo_label(lab, state, prompts):
    from .ensemble import pseudo_label_generate

    cfg, vm, seed = lab.cfg, lab.verbalizer, state.seed
    labelled = pseudo_label_generate(prompts, lab.backbone, lab.pool, vm, make_rng(seed, "pl_vote"))
    agree = float(np.mean([a.label == b.label for a, b in zip(labelled, lab.pool)]))
    p0 = init_prompt(cfg.backbone.prompt_length, lab.backbone.d, make_rng(seed, "pl_init"),
                     cfg.sources.init, lab.backbone.embed, task_id="target")
    pre = replace(cfg.adapt_config(), epochs=cfg.pseudo_label.pretrain_epochs, batch_size=32)
    p1 = prompt_tune(p0, lab.backbone, labelled, vm, pre, rng=make_rng(seed, "pl_pretrain"))
    p2 = prompt_tune(p1, lab.backbone, state.episode.train, vm, cfg.adapt_config(),
                     rng=make_rng(seed, "pl_tune"))
    return MethodOutput(prompt_predict(p2, lab.backbone, state.episode.test, vm),
                        extras={"pseudo_label_agreement": agree})


# -- results -------------------------------------------------------------------

@dataclass
class SeedRecord:
    """Everything needed to export per-sample case studies for one seed."""
    sample_ids: np.ndarray
    gold: np.ndarray
    final: np.ndarray
    source_preds: np.ndarray        # (N, T)
    weights: np.ndarray             # (N, T) or None
    sources: list                   # original source indices of the T columns


@dataclass
class RunResult:
    method: str
    task: str = TASK
    n_sources: int = 0
    seeds: list = field(default_factory=list)
    values: dict = field(default_factory=lambda: {m: [] for m in METRICS})
    weights: list = field(default_factory=list)      # per seed: mean weight per selected source
    source_f1: list = field(default_factory=list)    # per seed: test F1 per selected source
    source_ids: list = field(default_factory=list)   # per seed: selected source indices
    failed: dict = field(default_factory=dict)       # seed -> error message
    extras: list = field(default_factory=list)
    records: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def n_seeds(self):
        return len(self.seeds)

    @property
    def complete(self):
        return not self.failed

    def mean(self, metric="accuracy"):
        v = self.values[metric]
        return float(np.mean(v)) if v else float("nan")

    def stderr(self, metric="accuracy"):
        return stderr(self.values[metric])

    def correlations(self):
        """Per-seed Pearson r of mean attention weight against source F1 (degenerate seeds skipped)."""
        out = []
        for w, f in zip(self.weights, self.source_f1):
            if w is None:
                continue
            try:
                out.append(pearson(w, f))
            except (DegenerateInputError, ConfigError):
                continue
        return out


def _seed_job(lab, seed, source_counts, methods, keep_records):
    """All methods and source counts for one seed; errors are captured, not raised."""
    try:
        state = prepare_seed(lab, seed)
    except (SesomError, FloatingPointError, ValueError) as exc:
        return {k: {"error": f"{type(exc).__name__}: {exc}"} for k in source_counts}
    vm = lab.verbalizer
    y = state.test.labels
    all_preds = source_predictions(state.test, vm)
    out = {}
    for k in source_counts:
        cols = top_sources(state.dev_f1, k)
        try:
            res = evaluate_methods(lab, state, cols, methods)
        except (SesomError, FloatingPointError, ValueError) as exc:
            out[k] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        sp = all_preds[:, cols]
        src_f1 = np.array([task_f1(sp[:, j], y, vm.num_labels) for j in range(len(cols))])
        per = {}
        for m, mo in res.items():
            scores = {s: compute_metrics(mo.preds, y, s) for s in METRICS
                      if s != "f1_binary" or vm.num_labels == 2}
            rec = None
            if keep_records:
                rec = SeedRecord(state.test.sample_ids, y, np.asarray(mo.preds), sp, mo.weights, cols)
            per[m] = {"scores": scores, "cols": cols, "src_f1": src_f1, "extras": mo.extras,
                      "weights": None if mo.weights is None else mo.weights.mean(axis=0),
                      "record": rec}
        out[k] = per
    return out


_WORKER_LAB = None


def _init_worker(lab):
    global _WORKER_LAB
    _WORKER_LAB = lab


def _worker(args):
    return _seed_job(_WORKER_LAB, *args)


def run_grid(lab, seeds, methods, source_counts=(0,), keep_records=True, workers=1):
    """Results keyed by ``(n_sources, method)`` over ``seeds``.

    Each seed's episode, adaptation and bundles are computed once and shared
    by every method and source count.
    """
    results = {(k, m): RunResult(m, TASK, k) for k in source_counts for m in methods}
    t0 = time.perf_counter()
    jobs = [(s, tuple(source_counts), tuple(methods), keep_records) for s in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(lab,)) as pool:
            outputs = list(pool.map(_worker, jobs))
    else:
        outputs = [_seed_job(lab, *j) for j in jobs]
    for seed, by_k in zip(seeds, outputs):
        for k, per in by_k.items():
            if "error" in per:
                for m in methods:
                    results[(k, m)].failed[seed] = per["error"]
                log.warning("seed %d failed: %s", seed, per["error"])
                continue
            for m, r in per.items():
                rr = results[(k, m)]
                rr.seeds.append(seed)
                for s, v in r["scores"].items():
                    rr.values[s].append(v)
                rr.weights.append(r["weights"])
                rr.source_f1.append(r["src_f1"])
                rr.source_ids.append(list(r["cols"]))
                rr.extras.append(r["extras"])
                if r["record"] is not None:
                    rr.records[seed] = r["record"]
    elapsed = time.perf_counter() - t0
    for rr in results.values():
        rr.wall_clock = elapsed
    return results


def seed_list(cfg):
    off = cfg.experiment.seed_offset
    return list(range(off, off + cfg.experiment.seeds))


def run_experiment(cfg, lab=None, keep_records=True):
    """Run every configured method over the configured seeds: ``{method: RunResult}``."""
    lab = lab if lab is not None else build_lab(cfg)
    if lab.cfg is not cfg:
        lab = replace(lab, cfg=cfg)
    ex = cfg.experiment
    grid = run_grid(lab, seed_list(cfg), ex.methods, (ex.n_sources,), keep_records, ex.workers)
    return {m: grid[(ex.n_sources, m)] for m in ex.methods}


def sweep(cfg, over, values, lab=None, keep_records=False):
    """Results per swept value: ``{value: {method: RunResult}}``.

    ``over="sources"`` keeps the top-k sources by few-shot F1;
    ``over="shots"`` changes the episode size.
    """
    lab = lab if lab is not None else build_lab(cfg)
    ex = cfg.experiment
    if over == "sources":
        bad = [k for k in values if not 1 <= k <= cfg.suite.n_sources]
        if bad:
            raise ConfigError(f"source counts out of range: {bad}")
        lab = replace(lab, cfg=cfg)
        grid = run_grid(lab, seed_list(cfg), ex.methods, tuple(values), keep_records, ex.workers)
        return {k: {m: grid[(k, m)] for m in ex.methods} for k in values}
    if over == "shots":
        out = {}
        for k in values:
            c = cfg.with_overrides(shots=int(k))
            out[k] = run_experiment(c, replace(lab, cfg=c), keep_records)
        return out
    raise ConfigError(f"cannot sweep over {over!r}; use 'sources' or 'shots'")


# -- reports -------------------------------------------------------------------------

RESULT_COLUMNS = ("method", "task", "metric", "mean", "stderr", "n_seeds")


def result_rows(results, label=None):
    """One row per (method, metric); values in percent to two decimals."""
    rows = []
    for key, rr in results.items():
        name = rr.method if label is None else label(key, rr)
        for metric in METRICS:
            if not rr.values[metric]:
                continue
            rows.append((name, rr.task, metric, f"{100 * rr.mean(metric):.2f}",
                         f"{100 * rr.stderr(metric):.2f}", str(rr.n_seeds)))
    return rows


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_results(results, path, label=None):
    write_csv(path, RESULT_COLUMNS, result_rows(results, label))


def attention_report(results, n_sources=None):
    """Mean weight per (target, source) plus the mean per-seed attention/F1 correlation.

    ``results`` is a sequence of RunResult, one per target task. Columns are
    original source indices; sources left out by top-k selection get 0.
    Returns ``(targets, matrix, r)`` where ``r`` is NaN when no seed had
    enough variation to define a correlation.
    """
    results = list(results)
    if not results:
        raise ConfigError("no results to report on")
    if n_sources is None:
        n_sources = max(max(c) for rr in results for c in rr.source_ids) + 1 if any(
            rr.source_ids for rr in results) else 0
    targets, rows, rs = [], [], []
    for rr in results:
        if not rr.weights or any(w is None for w in rr.weights):
            raise ConfigError(f"{rr.method} on {rr.task} stored no attention weights")
        full = np.zeros((len(rr.weights), n_sources))
        for i, (w, cols) in enumerate(zip(rr.weights, rr.source_ids)):
            full[i, cols] = w
        targets.append(rr.task)
        rows.append(full.mean(axis=0))
        corr = rr.correlations()
        rs.append(float(np.mean(corr)) if corr else float("nan"))
    return targets, np.array(rows), np.array(rs)


def write_weights(results, path):
    targets, mat, rs = attention_report(results)
    header = ["target"] + [f"source{j}" for j in range(mat.shape[1])] + ["pearson_r"]
    rows = [[t] + [f"{x:.6f}" for x in row] + [f"{r:.4f}"] for t, row, r in zip(targets, mat, rs)]
    write_csv(path, header, rows)
    return targets, mat, rs


def case_study_export(result, sample_ids, seed=None):
    """Per-sample records of source predictions, weights, final and gold labels."""
    if not result.records:
        raise ConfigError(f"{result.method} run kept no per-sample records")
    seed = min(result.records) if seed is None else seed
    if seed not in result.records:
        raise LookupFailure(f"seed {seed} not in this run")
    rec = result.records[seed]
    if rec.weights is None:
        raise ConfigError(f"{result.method} produces no per-source weights")
    index = {int(s): i for i, s in enumerate(rec.sample_ids)}
    out = []
    for sid in sample_ids:
        i = index.get(int(sid))
        if i is None:
            raise LookupFailure(f"sample id {sid} is not in the test split")
        w = rec.weights[i]
        if abs(float(np.sum(w)) - 1.0) > 1e-6:
            raise NumericError(f"weights of sample {sid} sum to {np.sum(w)}")
        out.append({"sample_id": int(sid), "gold": int(rec.gold[i]), "final": int(rec.final[i]),
                    "per_source": [[int(p), float(x)] for p, x in zip(rec.source_preds[i], w)]})
    return out


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def snapshot(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.snapshot.toml")
    save_config(cfg, path)
    return path
