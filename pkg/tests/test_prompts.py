import numpy as np
import pytest

from sesom.backbone import TokenSequence, encode_batch, loss_and_grads
from sesom.errors import ConfigError, DimensionError, FormatError
from sesom.numerics import cosine_similarity, finite_diff_grad, relative_error
from sesom.prompts import (SoftPrompt, TuneConfig, few_shot_adapt, init_prompt, label_targets,
                           load_prompt, prompt_predict, prompt_tune, save_prompt, spot_t, spot_t_retrieve)
from sesom.tasks import SuiteConfig, gen_task
from sesom.verbalizer import VerbalizerMap


@pytest.fixture(scope="module")
def source0_task(reference_lab):
    suite = SuiteConfig()
    data = gen_task(suite.source_spec(0), 300, np.random.default_rng(0))
    return reference_lab.backbone, data, VerbalizerMap(suite.source_verbalizer(0))


# -- init ---------------------------------------------------------------------

def test_gaussian_init_deterministic():
    a = init_prompt(3, 4, np.random.default_rng(2), "gaussian")
    b = init_prompt(3, 4, np.random.default_rng(2), "gaussian")
    assert np.array_equal(a.matrix, b.matrix)


def test_vocab_rows_are_table_rows(tiny_backbone):
    p = init_prompt(5, 4, np.random.default_rng(0), "vocab_rows", tiny_backbone.embed)
    for row in p.matrix:
        assert any(np.array_equal(row, e) for e in tiny_backbone.embed)
    assert len({tuple(r) for r in p.matrix}) == 5


def test_gaussian_mean_within_three_sigma():
    p = init_prompt(1000, 32, np.random.default_rng(9), "gaussian")
    assert abs(p.matrix.mean()) < 3 * 0.5 / np.sqrt(1000 * 32)


def test_vocab_rows_too_many(tiny_backbone):
    with pytest.raises(ConfigError):
        init_prompt(10, 4, np.random.default_rng(0), "vocab_rows", tiny_backbone.embed)


def test_init_bad_scheme_and_length():
    with pytest.raises(ConfigError):
        init_prompt(2, 4, np.random.default_rng(0), "xavier")
    with pytest.raises(ConfigError):
        init_prompt(0, 4, np.random.default_rng(0), "gaussian")


def test_soft_prompt_rejects_nonfinite():
    with pytest.raises(Exception):
        SoftPrompt("x", np.array([[np.nan, 0.0]]))


def test_tune_config_validation():
    with pytest.raises(ConfigError):
        TuneConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TuneConfig(epochs=-1)


# -- tuning ---------------------------------------------------------------------

def test_zero_epochs_returns_same_matrix(frozen_tiny_backbone):
    p = init_prompt(2, 4, np.random.default_rng(0), "gaussian")
    data = [TokenSequence([1, 2], 0), TokenSequence([3], 1)]
    out = prompt_tune(p, frozen_tiny_backbone, data, VerbalizerMap((5, 6)), TuneConfig(epochs=0))
    assert np.array_equal(out.matrix, p.matrix)
    assert out is not p


def test_tune_needs_frozen_backbone(tiny_backbone):
    p = init_prompt(2, 4, np.random.default_rng(0), "gaussian")
    with pytest.raises(ConfigError):
        prompt_tune(p, tiny_backbone, [TokenSequence([1], 0)], VerbalizerMap((5, 6)), TuneConfig())


def test_label_without_verbalizer_entry():
    with pytest.raises(ConfigError):
        label_targets([TokenSequence([1], 2)], VerbalizerMap((5, 6)))


def test_tuning_learns_separable_task(source0_task):
    bb, data, vm = source0_task
    before = bb.fingerprint()
    p0 = init_prompt(8, bb.d, np.random.default_rng(1), "vocab_rows", bb.embed, "s0")
    hist = []
    p = prompt_tune(p0, bb, data, vm, TuneConfig(epochs=10), history=hist)
    acc = np.mean(prompt_predict(p, bb, data, vm) == [s.label for s in data])
    assert acc > 0.9
    assert hist[-1] <= hist[0]
    assert bb.fingerprint() == before
    assert not np.array_equal(p.matrix, p0.matrix)


def test_prompt_gradient_one_sample(frozen_tiny_backbone, rng):
    ids, mask = encode_batch([TokenSequence([2, 7, 7], 0)])
    P = rng.normal(size=(3, 4))
    _, g, _ = loss_and_grads(P, ids, mask, np.array([5]), frozen_tiny_backbone)
    fd = finite_diff_grad(lambda q: loss_and_grads(q, ids, mask, np.array([5]), frozen_tiny_backbone)[0], P)
    assert relative_error(g, fd) < 1e-4


def test_few_shot_adapt(source0_task):
    bb, data, vm = source0_task
    rng = np.random.default_rng(4)
    srcs = [init_prompt(8, bb.d, rng, "vocab_rows", bb.embed, f"s{j}") for j in range(2)]
    same = few_shot_adapt(srcs, bb, data[:32], vm, TuneConfig(epochs=2), skip=True)
    assert all(np.array_equal(a.matrix, b.matrix) for a, b in zip(same, srcs))
    moved = few_shot_adapt(srcs, bb, data[:32], vm, TuneConfig(epochs=2), seed=0)
    assert all(not np.array_equal(a.matrix, b.matrix) for a, b in zip(moved, srcs))
    assert not np.array_equal(moved[0].matrix, moved[1].matrix)
    with pytest.raises(ConfigError):
        few_shot_adapt(srcs, bb, [], vm, TuneConfig())


# -- SPoT-t retrieval ------------------------------------------------------------

def test_retrieve_exact_copy(rng):
    srcs = [SoftPrompt(str(j), rng.normal(size=(2, 3))) for j in range(4)]
    idx, sim = spot_t_retrieve(srcs[2].copy(), srcs)
    assert idx == 2 and sim == pytest.approx(1.0, abs=1e-15)


def test_retrieve_aligned_over_orthogonal():
    target = SoftPrompt("t", [[1.0, 0.0]])
    srcs = [SoftPrompt("a", [[0.0, 1.0]]), SoftPrompt("b", [[0.0, -2.0]]), SoftPrompt("c", [[0.5, 0.5]])]
    assert spot_t_retrieve(target, srcs)[0] == 2


def test_retrieve_brute_force_and_scale_invariance(rng):
    for _ in range(20):
        target = SoftPrompt("t", rng.normal(size=(3, 2)))
        srcs = [SoftPrompt(str(j), rng.normal(size=(3, 2))) for j in range(4)]
        sims = [float(np.dot(target.matrix.ravel(), s.matrix.ravel())
                      / np.linalg.norm(target.matrix) / np.linalg.norm(s.matrix)) for s in srcs]
        idx, _ = spot_t_retrieve(target, srcs)
        assert idx == int(np.argmax(sims))
        scaled = [SoftPrompt(s.task_id, s.matrix * c) for s, c in zip(srcs, rng.uniform(0.1, 10, 4))]
        assert spot_t_retrieve(SoftPrompt("t", target.matrix * 7.0), scaled)[0] == idx


def test_retrieve_ties_go_low():
    srcs = [SoftPrompt("a", [[1.0, 1.0]]), SoftPrompt("b", [[2.0, 2.0]])]
    assert spot_t_retrieve(SoftPrompt("t", [[1.0, 1.0]]), srcs)[0] == 0


def test_retrieve_shape_mismatch():
    with pytest.raises(DimensionError):
        spot_t_retrieve(SoftPrompt("t", [[1.0, 0.0]]), [SoftPrompt("a", [[1.0, 0.0, 0.0]])])


def test_spot_t_runs(source0_task):
    bb, data, vm = source0_task
    rng = np.random.default_rng(5)
    srcs = [init_prompt(8, bb.d, rng, "vocab_rows", bb.embed, f"s{j}") for j in range(3)]
    tuned, idx = spot_t(srcs, bb, data[:32], vm, TuneConfig(epochs=1), warmup_epochs=1)
    assert 0 <= idx < 3
    assert tuned.task_id == "target" and tuned.matrix.shape == (8, bb.d)


# -- file I/O -------------------------------------------------------------------

def test_prompt_round_trip(tmp_path, rng):
    p = SoftPrompt("sourceé", rng.normal(size=(3, 5)))
    save_prompt(p, tmp_path / "p.bin")
    q = load_prompt(tmp_path / "p.bin")
    assert q.task_id == p.task_id and np.array_equal(q.matrix, p.matrix)


def test_prompt_truncated_and_trailing(tmp_path, rng):
    path = tmp_path / "p.bin"
    save_prompt(SoftPrompt("x", rng.normal(size=(2, 2))), path)
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(FormatError):
        load_prompt(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        load_prompt(path)


def test_cosine_used_for_retrieval_is_scale_free(rng):
    a, b = rng.normal(size=6), rng.normal(size=6)
    assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(3 * a, 0.5 * b), rel=1e-14)
