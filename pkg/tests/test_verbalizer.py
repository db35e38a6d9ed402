import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesom.errors import ConfigError, InvalidMapError
from sesom.verbalizer import VerbalizerMap, build_map, map_logits, predict_label


def brute_remap(l, remap):
    out = list(l)
    for k, t in remap.items():
        lo, hi = sorted((l[k], l[t]))
        out[k], out[t] = lo, hi
    return out


def test_worked_example_tokens_209_10998():
    # [PAPER] the source model scored token 10998 above 209; after mapping
    # the target's token 209 carries the larger logit
    l = np.zeros(11000)
    l[10998], l[209] = 7.0, 2.0
    out = map_logits(l, VerbalizerMap((209,), {10998: 209}))
    assert out[209] == 7.0 and out[10998] == 2.0
    assert np.count_nonzero(out) == 2


def test_empty_remap_is_identity(rng):
    l = rng.normal(size=6)
    assert np.array_equal(map_logits(l, VerbalizerMap((0, 1))), l)


def test_v6_two_pairs_against_oracle(rng):
    for _ in range(20):
        l = rng.normal(size=6)
        remap = {0: 1, 2: 3}
        assert np.array_equal(map_logits(l, VerbalizerMap((1, 3), remap)), brute_remap(l, remap))


def test_input_not_modified(rng):
    l = rng.normal(size=4)
    keep = l.copy()
    map_logits(l, {0: 1})
    assert np.array_equal(l, keep)


def test_batch_equals_rowwise(rng):
    L = rng.normal(size=(3, 5, 8))
    vm = VerbalizerMap((0, 1), {2: 0, 3: 1})
    out = map_logits(L, vm)
    for idx in np.ndindex(3, 5):
        assert np.array_equal(out[idx], map_logits(L[idx], vm))


def test_overlapping_map_rejected():
    with pytest.raises(InvalidMapError):
        VerbalizerMap((0,), {1: 2, 2: 3})
    with pytest.raises(InvalidMapError):
        map_logits(np.zeros(4), {1: 2, 2: 3})


def test_non_injective_map_rejected():
    with pytest.raises(InvalidMapError):
        VerbalizerMap((0,), {1: 0, 2: 0})


def test_out_of_range_index():
    with pytest.raises(IndexError):
        map_logits(np.zeros(4), {5: 1})


@st.composite
def logits_and_map(draw):
    v = draw(st.integers(2, 24))
    l = np.array(draw(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=v, max_size=v)))
    perm = draw(st.permutations(range(v)))
    n_pairs = draw(st.integers(0, v // 2))
    remap = {perm[2 * i]: perm[2 * i + 1] for i in range(n_pairs)}
    return l, remap


@settings(max_examples=200, deadline=None)
@given(logits_and_map())
def test_mapping_properties(case):
    l, remap = case
    vm = VerbalizerMap((0,), remap)
    out = map_logits(l, vm)
    assert np.array_equal(map_logits(out, vm), out)
    touched = set()
    for k, t in remap.items():
        assert sorted((out[k], out[t])) == sorted((l[k], l[t]))
        assert out[k] <= out[t]
        touched |= {k, t}
    rest = [i for i in range(len(l)) if i not in touched]
    assert np.array_equal(out[rest], l[rest])


# -- predict_label --------------------------------------------------------------

def test_predict_favoured_label():
    assert predict_label([5.0, -1.0, 0.0], VerbalizerMap((0, 1))) == 0


def test_predict_tie_goes_to_label_zero():
    assert predict_label([1.0, 1.0, 9.0], VerbalizerMap((0, 1))) == 0


def test_predict_three_labels_oracle(rng):
    vm = VerbalizerMap((7, 2, 4))
    for _ in range(50):
        l = rng.normal(size=9)
        best = max(range(3), key=lambda c: (l[vm.label_tokens[c]], -c))
        assert predict_label(l, vm) == best


def test_predict_invariant_under_reapplication(rng):
    vm = VerbalizerMap((0, 1), {2: 0, 3: 1})
    for _ in range(20):
        l = rng.normal(size=6)
        once = map_logits(l, vm)
        assert predict_label(once, vm) == predict_label(map_logits(once, vm), vm)


def test_token_for_unknown_label():
    with pytest.raises(ConfigError):
        VerbalizerMap((0, 1)).token_for(2)


def test_label_tokens_distinct():
    with pytest.raises(ConfigError):
        VerbalizerMap((1, 1))


# -- build_map ------------------------------------------------------------------

def test_identical_verbalizers_empty_remap():
    assert build_map([(5, 9), (6,)], [5, 6]).remap == {}


def test_true_false_to_one_zero():
    # [PAPER] the two-pair style map: "False"/"True" tokens onto "0"/"1"
    vm = build_map([2, 3], [0, 1])
    assert vm.remap == {2: 0, 3: 1}
    assert len(vm.remap) == 2


def test_three_label_bijection_round_trip():
    src, tgt = [10, 11, 12], [20, 21, 22]
    fwd = build_map(src, tgt).remap
    back = build_map(tgt, src).remap
    assert {back[fwd[s]] for s in src} == set(src)


def test_first_token_collision():
    with pytest.raises(ConfigError):
        build_map([(4, 1), (4, 2)], [0, 1])


def test_label_count_mismatch():
    with pytest.raises(ConfigError):
        build_map([1, 2, 3], [0, 1])
