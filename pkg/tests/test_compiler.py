import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patconv import (PRUNED, ConvSpec, FormatError, PrunedConvLayer, ShapeError,
                     build_access_templates, canonical_scp_set, compile_layer, compile_model,
                     emit_plan_text, extended_pattern_set, extract_layer_info,
                     filter_kernel_reorder, permute_channels, propagate_permutation, read_plans,
                     write_plans)
from patconv.compiler import layer_fingerprint, plans_from_json, plans_to_json
from patconv.patterns import PatternSet

from helpers import random_pruned, two_layer_model

GOLDEN = Path(__file__).parent / "golden" / "tiny_plan.json"
SPEC = ConvSpec(3, 3, 1, 1)


def layer_from_ids(ids, pset=None, seed=0):
    pset = pset or canonical_scp_set()
    ids = np.asarray(ids, np.uint8)
    n = int((ids != PRUNED).sum())
    w = np.random.default_rng(seed).standard_normal(n * pset.nnz).astype(np.float32)
    return PrunedConvLayer(pset, ids, w)


def permute_filters(layer, order):
    """Layer whose filter at position i is the original filter order[i]."""
    offs = layer.weight_offsets()
    rows = [offs[f, c] for f in order for c in range(layer.channels) if offs[f, c] >= 0]
    w = layer.compact_weights.reshape(-1, layer.nnz)[np.asarray(rows, int) // layer.nnz]
    return PrunedConvLayer(layer.pattern_set, layer.pattern_ids[list(order)], w.ravel(),
                           layer.bias[list(order)], layer.balanced)


@pytest.fixture
def tiny():
    return layer_from_ids([[1, 1, 2], [2, 2, 3], [2, 1, 1]])


def test_reorder_example(tiny):
    perm, korders = filter_kernel_reorder(extract_layer_info(tiny))
    assert perm == (0, 2, 1)
    assert korders == ((0, 1, 2), (0, 1, 2), (1, 2, 0))


def test_identical_signatures_identity_single_group():
    layer = layer_from_ids([[0, 1, 2]] * 4)
    plan = compile_layer(layer, SPEC, (6, 6))
    assert plan.permutation == (0, 1, 2, 3)
    assert len(plan.groups) == 1


def test_kernel_visit_order_groups_patterns():
    layer = layer_from_ids([[2, 0, 2, 1]])
    _, korders = filter_kernel_reorder(extract_layer_info(layer))
    assert korders[0] == (1, 3, 0, 2)


def test_access_templates():
    pset = PatternSet.from_codes([58])
    assert build_access_templates(pset, 8)[0].offsets == (1, 8, 9, 10)
    full = build_access_templates(PatternSet.from_codes([511]), 8)[0]
    assert full.offsets == (0, 1, 2, 8, 9, 10, 16, 17, 18)
    assert build_access_templates(PatternSet.from_codes([16]), 8)[0].offsets == (9,)
    for stride in (3, 7, 58):
        for tmpl in build_access_templates(canonical_scp_set(), stride):
            assert stride + 1 in tmpl.offsets
            assert list(tmpl.offsets) == sorted(set(tmpl.offsets))
    with pytest.raises(ShapeError):
        build_access_templates(pset, 2)


def test_tiny_plan_hand_derived(tiny):
    plan = compile_layer(tiny, SPEC, (6, 6), threads=2, name="tiny")
    assert plan.permutation == (0, 2, 1)
    assert plan.order == (0, 2, 1)
    assert plan.kernel_orders == ((0, 1, 2), (1, 2, 0), (0, 1, 2))
    assert [(g.start, g.stop, g.signature, g.macs) for g in plan.groups] == \
        [(0, 2, (1, 1, 2), 864), (2, 3, (2, 2, 3), 432)]
    assert [(u.group, u.start, u.stop, u.macs) for u in plan.units] == \
        [(0, 0, 1, 432), (0, 1, 2, 432), (1, 2, 3, 432)]
    assert plan.partition == ((0, 2), (1,))
    assert plan.worker_macs() == (864, 432)
    assert plan.row_stride == 8


def test_golden_plan_file(tiny, tmp_path):
    plan = compile_layer(tiny, SPEC, (6, 6), threads=2, name="tiny")
    text = plans_to_json([plan, None])
    assert text == GOLDEN.read_text()
    back = plans_from_json(text)
    assert back[1] is None and plans_to_json(back) == text
    write_plans(back, tmp_path / "p.pplan")
    assert read_plans(tmp_path / "p.pplan")[0].permutation == plan.permutation


def test_plan_file_errors(tiny):
    text = plans_to_json([compile_layer(tiny, SPEC, (6, 6))])
    with pytest.raises(FormatError, match="version"):
        plans_from_json(text.replace('"version": 1', '"version": 9'))
    doc = json.loads(text)
    doc["layers"][0]["permutation"] = [0, 0, 1]
    with pytest.raises(FormatError, match="bijection"):
        plans_from_json(json.dumps(doc))
    doc = json.loads(text)
    doc["layers"][0]["partition"] = [[]]
    with pytest.raises(FormatError, match="partition"):
        plans_from_json(json.dumps(doc))
    with pytest.raises(FormatError):
        plans_from_json("{")


def test_single_thread_partition(rng):
    plan = compile_layer(random_pruned(rng, 12, 8), SPEC, (8, 8), threads=1)
    assert plan.threads == 1
    assert sorted(plan.partition[0]) == list(range(len(plan.units)))


@pytest.mark.parametrize("threads", [2, 3, 4, 6])
def test_balanced_uniform_signatures_split_evenly(threads):
    layer = layer_from_ids([[0, 1, 1, 3, PRUNED, PRUNED]] * 12)
    plan = compile_layer(layer, SPEC, (10, 10), threads=threads)
    macs = plan.worker_macs()
    assert len(set(macs)) == 1
    assert sum(macs) == 12 * 4 * 4 * 100


@settings(max_examples=40, deadline=None)
@given(f=st.integers(1, 24), c=st.integers(1, 10), k=st.sampled_from([4, 8, 12]),
       keep=st.sampled_from([0.25, 0.5, 1.0]), threads=st.integers(1, 8),
       seed=st.integers(0, 2**32 - 1))
def test_plan_structure_property(f, c, k, keep, threads, seed):
    rng = np.random.default_rng(seed)
    if round(c * keep + 1e-9) < 1:
        keep = 1.0
    layer = random_pruned(rng, f, c, k, keep)
    info = extract_layer_info(layer)
    plan = compile_layer(layer, SPEC, (5, 5), threads=threads)
    assert sorted(plan.permutation) == list(range(f))
    order = plan.order
    for new in range(f):
        assert sorted(plan.kernel_orders[new]) == list(info.connectivity[order[new]])
        pats = [int(layer.pattern_ids[order[new], ch]) for ch in plan.kernel_orders[new]]
        assert pats == sorted(pats)
    # groups partition the filters; members share a signature
    covered = []
    for g in plan.groups:
        covered.extend(range(g.start, g.stop))
        assert {info.signatures[order[i]] for i in range(g.start, g.stop)} == {g.signature}
    assert covered == list(range(f))
    assert len(plan.groups) <= len(set(info.signatures))
    # every unit is owned by exactly one worker
    owned = sorted(u for part in plan.partition for u in part)
    assert owned == list(range(len(plan.units)))
    macs = plan.worker_macs()
    assert sum(macs) == info.macs_per_position * 25
    assert max(macs) - min(macs) <= max(g.macs for g in plan.groups)


@settings(max_examples=30, deadline=None)
@given(f=st.integers(1, 16), c=st.integers(1, 8), k=st.sampled_from([4, 8, 12]),
       seed=st.integers(0, 2**32 - 1))
def test_reorder_multiset_and_idempotence(f, c, k, seed):
    rng = np.random.default_rng(seed)
    layer = random_pruned(rng, f, c, k, 1.0 if c < 2 else 0.5)
    info = extract_layer_info(layer)
    plan = compile_layer(layer, SPEC, (4, 4))
    before = Counter((info.signatures[fi], p) for fi in range(f) for p in info.kernel_patterns[fi])
    reordered = permute_filters(layer, plan.order)
    info2 = extract_layer_info(reordered)
    after = Counter((info2.signatures[fi], p) for fi in range(f)
                    for p in info2.kernel_patterns[fi])
    assert before == after
    again = compile_layer(reordered, SPEC, (4, 4))
    assert again.permutation == tuple(range(f))


def test_permute_channels_inverse(rng):
    layer = random_pruned(rng, 5, 7, 8, 0.5)
    perm = rng.permutation(7)
    inv = np.argsort(perm)
    moved = permute_channels(layer, perm)
    for f in range(5):
        for c in range(7):
            np.testing.assert_array_equal(moved.kernel(f, perm[c]), layer.kernel(f, c))
    back = permute_channels(moved, inv)
    np.testing.assert_array_equal(back.pattern_ids, layer.pattern_ids)
    assert back.compact_weights.tobytes() == layer.compact_weights.tobytes()
    with pytest.raises(ShapeError):
        permute_channels(layer, [0, 0, 1, 2, 3, 4, 5])


def test_propagate_identity_and_shape(rng):
    first = layer_from_ids([[0, 1]] * 4)
    plan = compile_layer(first, SPEC, (6, 6))
    nxt = random_pruned(rng, 3, 4)
    same = propagate_permutation(plan, nxt)
    assert same.compact_weights.tobytes() == nxt.compact_weights.tobytes()
    with pytest.raises(ShapeError):
        propagate_permutation(plan, random_pruned(rng, 3, 5))


def test_compile_model_threads_permutations(rng):
    model = two_layer_model(rng)
    plans = compile_model(model, threads=2)
    assert len(plans) == 2
    c2 = permute_channels(model["c2"].layer, plans[0].permutation)
    assert plans[1].fingerprint == layer_fingerprint(c2, SPEC, (6, 6))


def test_fingerprint_sensitivity(tiny):
    base = layer_fingerprint(tiny, SPEC, (6, 6))
    assert base == layer_fingerprint(tiny, SPEC, (6, 6))
    assert base != layer_fingerprint(tiny, SPEC, (8, 8))
    assert base != layer_fingerprint(tiny, ConvSpec(3, 3, 1, 0), (6, 6))
    other = layer_from_ids([[1, 1, 2], [2, 2, 3], [2, 1, 0]])
    assert base != layer_fingerprint(other, SPEC, (6, 6))


def test_emit_plan_text(tiny):
    text = emit_plan_text(compile_layer(tiny, SPEC, (6, 6), threads=2, name="tiny"))
    assert "layer tiny: F=3 C=3" in text
    assert "group 0: filters [0, 2)" in text
    assert "2 x pattern 1" in text and "1 x pattern 3" in text


def test_extended_set_plan_templates():
    plan = compile_layer(layer_from_ids([[11, 4]], extended_pattern_set(12)), SPEC, (5, 5))
    assert len(plan.templates) == 12
