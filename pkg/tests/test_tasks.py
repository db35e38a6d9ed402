import json
import struct

import numpy as np
import pytest

from sesom.backbone import TokenSequence
from sesom.ensemble import BundleBatch
from sesom.errors import ConfigError, FormatError
from sesom.prompts import prompt_predict
from sesom.tasks import (MixtureSpec, SuiteConfig, TaskSpec, base_corpus, gen_task, label_rule,
                         load_logit_dump, load_logit_dump_batch, load_manifest, sample_episode,
                         save_logit_dump, with_overlap)
from sesom.verbalizer import VerbalizerMap

SUITE = SuiteConfig()


# -- specs and generation ------------------------------------------------------

def test_overlap_one_with_itself_keeps_rule():
    ref = SUITE.source_spec(0)
    same = with_overlap(ref, "copy", 1.0, SUITE.filler(), np.random.default_rng(0))
    assert [set(f) for f in same.label_features] == [set(f) for f in ref.label_features]


def test_overlap_zero_is_disjoint():
    ref = SUITE.source_spec(0)
    fresh = with_overlap(ref, "fresh", 0.0, range(300, 400), np.random.default_rng(0))
    old = set().union(*ref.label_features)
    assert not old & set().union(*fresh.label_features)
    assert fresh.feature_overlap == 0.0 and fresh.reference == "source0"


def test_overlap_half_shares_half():
    ref = SUITE.source_spec(0)
    half = with_overlap(ref, "half", 0.5, range(300, 400), np.random.default_rng(0))
    for new, old in zip(half.label_features, ref.label_features):
        assert len(set(new) & set(old)) == 3


def test_infeasible_overlap():
    ref = SUITE.source_spec(0)
    with pytest.raises(ConfigError):
        with_overlap(ref, "x", 1.0, (), np.random.default_rng(0), set_size=10)
    with pytest.raises(ConfigError):
        with_overlap(ref, "x", 0.0, range(300, 305), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        with_overlap(ref, "x", 1.5, range(300, 400), np.random.default_rng(0))


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("a", ((1,),), (0,))
    with pytest.raises(ConfigError):
        TaskSpec("a", ((1,), (2,)), (0, 0))
    with pytest.raises(ConfigError):
        TaskSpec("a", ((1,), (2,)), (0, 1), length=(1, 1), signal_count=2)
    with pytest.raises(ConfigError):
        TaskSpec("a", ((1,), (2,)), (0, 1), length=(4, 4), filler=())
    with pytest.raises(ConfigError):
        TaskSpec("a", ((1,), (2,)), (0, 1), filler=(9,), label_probs=(0.5, 0.6))


def test_gen_needs_enough_samples():
    with pytest.raises(ConfigError):
        gen_task(SUITE.source_spec(0), 1, np.random.default_rng(0))


def test_samples_respect_spec():
    spec = SUITE.source_spec(2)
    data = gen_task(spec, 200, np.random.default_rng(1), start_id=50)
    assert [s.sample_id for s in data] == list(range(50, 250))
    for s in data:
        assert len(s.token_ids) == 12
        assert sum(t in spec.label_features[s.label] for t in s.token_ids) >= spec.signal_count


@pytest.mark.parametrize("spec", [SUITE.source_spec(0), SUITE.region_spec(1)], ids=["source0", "region1"])
def test_known_rule_accuracy(spec):
    data = gen_task(spec, 10000, np.random.default_rng(2))
    acc = np.mean([label_rule(spec, s.token_ids) == s.label for s in data])
    assert 0.95 <= acc <= 1.0


def test_label_marginals():
    from dataclasses import replace
    spec = replace(SUITE.source_spec(0), label_probs=(0.3, 0.7))
    data = gen_task(spec, 10000, np.random.default_rng(3))
    assert abs(np.mean([s.label for s in data]) - 0.7) < 0.03
    plain = gen_task(SUITE.source_spec(0), 10000, np.random.default_rng(3))
    assert abs(np.mean([s.label for s in plain]) - 0.5) < 0.03


def test_mixture_region_shares():
    data = gen_task(SUITE.target_spec(), 10000, np.random.default_rng(4))
    shares = np.bincount([s.region for s in data], minlength=4) / 10000
    assert np.allclose(shares, SUITE.region_shares, atol=0.03)
    for s in data[:200]:
        markers = set(SUITE.markers(s.region))
        assert markers <= set(s.token_ids)


def test_mixture_validation():
    with pytest.raises(ConfigError):
        MixtureSpec("m", (SUITE.region_spec(0),), (0.5,))
    with pytest.raises(ConfigError):
        MixtureSpec("m", (SUITE.region_spec(0), SUITE.source_spec(3)), (0.5, 0.5))


def test_suite_validation():
    with pytest.raises(ConfigError):
        SuiteConfig(n_sources=9)
    with pytest.raises(ConfigError):
        SuiteConfig(n_sources=3)
    with pytest.raises(ConfigError):
        SuiteConfig(tokens_per_label=7)


def test_base_corpus_targets_are_verbalizer_tokens():
    corpus = base_corpus(SUITE, n=300, rng=np.random.default_rng(0))
    assert {s.label for s in corpus} <= set(SUITE.STYLE_A + SUITE.STYLE_B)
    assert all(SUITE.selector(s.region) in s.token_ids for s in corpus)


def test_transfer_monotone_in_overlap(reference_lab):
    """A source prompt transfers better to tasks sharing more of its features."""
    ref = SUITE.source_spec(0)
    fresh = [t for g in (6, 7) for f in SUITE.group_features(g) for t in f]
    vm = VerbalizerMap(ref.verbalizer)
    prompt = reference_lab.sources[0]
    means = []
    for o in (0.0, 0.5, 1.0):
        accs = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            task = with_overlap(ref, f"o{o}", o, fresh, rng)
            data = gen_task(task, 400, rng)
            pred = prompt_predict(prompt, reference_lab.backbone, data, vm)
            accs.append(np.mean(pred == [s.label for s in data]))
        means.append(np.mean(accs))
    assert means[0] <= means[1] <= means[2]


# -- episodes ----------------------------------------------------------------

@pytest.fixture(scope="module")
def pool():
    return gen_task(SUITE.target_spec(), 600, np.random.default_rng(5))


def test_episode_deterministic(pool):
    a, b = sample_episode(pool, 32, 7), sample_episode(pool, 32, 7)
    assert [s.sample_id for s in a.train + a.dev] == [s.sample_id for s in b.train + b.dev]
    c = sample_episode(pool, 32, 8)
    assert [s.sample_id for s in a.train] != [s.sample_id for s in c.train]


def test_episode_stratified(pool):
    ep = sample_episode(pool, 32, 0)
    assert np.bincount([s.label for s in ep.train]).tolist() == [16, 16]
    assert np.bincount([s.label for s in ep.dev]).tolist() == [16, 16]


def test_episode_disjoint(pool):
    for seed in range(20):
        ep = sample_episode(pool, 32, seed)
        tr, dv, te = ({s.sample_id for s in split} for split in (ep.train, ep.dev, ep.test))
        assert len(tr) == len(dv) == 32
        assert not (tr & dv) and not (tr & te) and not (dv & te)
        assert len(tr | dv | te) == len(pool)


def test_episode_odd_k_not_stratified(pool):
    ep = sample_episode(pool, 7, 0, num_labels=2)
    assert len(ep.train) == 7


def test_episode_too_small():
    data = [TokenSequence([1], i % 2, sample_id=i) for i in range(10)]
    with pytest.raises(ConfigError):
        sample_episode(data, 8, 0)


# -- logit dumps ----------------------------------------------------------------

def _batch(rng, n=4, d=3, T=2, v=5):
    return BundleBatch(rng.normal(size=(n, d)), rng.normal(size=(n, T, v)),
                       np.array([0, 1, -1, 1][:n]), np.array([10, 11, 12, 2**40][:n]))


def test_dump_round_trip(tmp_path, rng):
    b = _batch(rng)
    path = tmp_path / "d.bin"
    save_logit_dump(path, b, {"task": "target", "sources": ["source0", "source1"]})
    back = load_logit_dump_batch(path)
    assert np.array_equal(back.x_hat, b.x_hat) and np.array_equal(back.logits, b.logits)
    assert back.labels.tolist() == b.labels.tolist() and back.sample_ids.tolist() == b.sample_ids.tolist()
    bundles = load_logit_dump(path)
    assert bundles[2].label is None and bundles[1].label == 1
    assert load_manifest(path)["sources"] == ["source0", "source1"]


def _record(sid, label, x, L):
    return struct.pack("<Qi", sid, label) + np.asarray(x, "<f8").tobytes() + np.asarray(L, "<f8").tobytes()


def test_dump_record_missing_a_source(tmp_path):
    d, v, T = 2, 3, 2
    good = _record(0, 1, [0.0, 1.0], np.zeros((T, v)))
    short = _record(1, 0, [2.0, 3.0], np.zeros((T - 1, v)))
    path = tmp_path / "d.bin"
    path.write_bytes(b"SESOMLD1" + struct.pack("<IIII", d, v, T, 2) + good + short)
    with pytest.raises(FormatError, match="record 1"):
        load_logit_dump_batch(path)


def test_dump_hand_built_three_records(tmp_path):
    recs = [
        _record(7, 0, [0.5, -0.5], [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
        _record(8, 1, [1.5, 2.5], [[-1.0, 0.0, 1.0], [0.25, 0.5, 0.75]]),
        _record(9, -1, [0.0, 0.0], [[9.0, 8.0, 7.0], [6.0, 5.0, 4.0]]),
    ]
    path = tmp_path / "d.bin"
    path.write_bytes(b"SESOMLD1" + struct.pack("<IIII", 2, 3, 2, 3) + b"".join(recs))
    out = load_logit_dump(path)
    assert len(out) == 3
    assert out[0].x_hat.tolist() == [0.5, -0.5] and out[0].label == 0
    assert out[0].source_logits.tolist() == [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
    assert out[1].x_hat.tolist() == [1.5, 2.5] and out[1].label == 1
    assert out[1].source_logits.tolist() == [[-1.0, 0.0, 1.0], [0.25, 0.5, 0.75]]
    assert out[2].label is None
    assert out[2].source_logits.tolist() == [[9.0, 8.0, 7.0], [6.0, 5.0, 4.0]]
    assert load_logit_dump_batch(path).sample_ids.tolist() == [7, 8, 9]


def test_dump_trailing_and_zero_sources(tmp_path, rng):
    path = tmp_path / "d.bin"
    save_logit_dump(path, _batch(rng))
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(FormatError):
        load_logit_dump_batch(path)
    path.write_bytes(b"SESOMLD1" + struct.pack("<IIII", 2, 3, 0, 0))
    with pytest.raises(FormatError):
        load_logit_dump_batch(path)


def test_manifest_is_json(tmp_path, rng):
    path = tmp_path / "d.bin"
    save_logit_dump(path, _batch(rng), {"verbalizer": [0, 1]})
    assert json.loads((tmp_path / "d.bin.manifest.json").read_text()) == {"verbalizer": [0, 1]}
