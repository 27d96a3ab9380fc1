from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patconv import (PRUNED, Conv, ConvSpec, DenseConvLayer, Linear, MaxPool, ModelGraph,
                     PrunedConvLayer, ReLU, ShapeError, ValidationError, extended_pattern_set,
                     extract_layer_info, pattern_prune_layer, prune_layer, to_dense,
                     validate_model)

from helpers import random_pruned, two_layer_model


def uniform_layer(pset, f, c, pid=0, value=1.0):
    ids = np.full((f, c), pid, np.uint8)
    return PrunedConvLayer(pset, ids, np.full(f * c * pset.nnz, value, np.float32))


def test_info_single_pattern(pset4):
    info = extract_layer_info(uniform_layer(pset4, 3, 5))
    assert info.histogram == {0: 15}
    assert info.signatures == ((0,) * 5,) * 3
    assert info.macs_per_position == 3 * 5 * 4


def test_info_half_pruned(rng):
    layer = random_pruned(rng, 6, 8, keep=0.5)
    info = extract_layer_info(layer, output_hw=(10, 10), batch=2)
    assert sum(info.histogram.values()) == 24
    assert info.total_macs == 2 * 100 * 24 * 4
    assert all(len(c) == 4 for c in info.connectivity)


@settings(max_examples=30, deadline=None)
@given(f=st.integers(1, 8), c=st.integers(1, 8), k=st.sampled_from([4, 8, 12]),
       seed=st.integers(0, 2**32 - 1))
def test_info_matches_brute_tally(f, c, k, seed):
    rng = np.random.default_rng(seed)
    pset = extended_pattern_set(k)
    ids = rng.integers(0, k, size=(f, c)).astype(np.uint8)
    ids[rng.random((f, c)) < 0.3] = PRUNED
    n = int((ids != PRUNED).sum())
    layer = PrunedConvLayer(pset, ids, rng.standard_normal(n * 4).astype(np.float32))
    info = extract_layer_info(layer)
    tally = Counter()
    for row in ids.tolist():
        for v in row:
            if v != PRUNED:
                tally[v] += 1
    assert info.histogram == dict(tally)
    for fi in range(f):
        kept = [ci for ci in range(c) if ids[fi, ci] != PRUNED]
        assert info.connectivity[fi] == tuple(kept)
        assert info.signatures[fi] == tuple(sorted(int(ids[fi, ci]) for ci in kept))


def test_info_layout_independent(rng):
    dense = DenseConvLayer.random(7, 6, 3, 3, rng)
    pset = extended_pattern_set(8)
    perm = rng.permutation(7)
    a = extract_layer_info(prune_layer(dense, pset, 0.5))
    shuffled = DenseConvLayer(dense.weights[perm], dense.bias[perm])
    b = extract_layer_info(prune_layer(shuffled, pset, 0.5))
    assert a.histogram == b.histogram
    assert [a.signatures[p] for p in perm] == list(b.signatures)


def test_info_rejects_bad_ids(pset4):
    layer = PrunedConvLayer(pset4, np.array([[9]], np.uint8), np.zeros(4, np.float32))
    with pytest.raises(ValidationError):
        extract_layer_info(layer)


def test_to_dense_scatter(rng, pset4):
    layer = random_pruned(rng, 5, 6, keep=0.5)
    dense = to_dense(layer)
    nz = np.count_nonzero(dense.weights.reshape(30, 9), axis=1).reshape(5, 6)
    assert (nz[layer.retained] == 4).all()
    assert (nz[~layer.retained] == 0).all()
    for f in range(5):
        for c in range(6):
            np.testing.assert_array_equal(dense.weights[f, c], layer.kernel(f, c))
    again, _ = pattern_prune_layer(dense, pset4)
    assert again.retained_kernels == 30
    kept = again.compact_weights.reshape(5, 6, 4)[layer.retained]
    np.testing.assert_array_equal(kept.ravel(), layer.compact_weights)


def test_pruned_layer_structure_checks(pset4):
    with pytest.raises(ShapeError):
        PrunedConvLayer(pset4, np.zeros((2, 2), np.uint8), np.zeros(15, np.float32))
    with pytest.raises(ShapeError):
        PrunedConvLayer(pset4, np.zeros(4, np.uint8), np.zeros(16, np.float32))


def test_validate_fresh_model(rng):
    assert validate_model(two_layer_model(rng)) == []


def test_validate_unbalanced_flag(pset4):
    ids = np.zeros((2, 3), np.uint8)
    ids[0, 2] = PRUNED
    layer = PrunedConvLayer(pset4, ids, np.ones(20, np.float32), balanced=True)
    problems = validate_model(layer)
    assert len(problems) == 1 and "balanced" in problems[0]


def test_validate_nan_names_location(pset4):
    w = np.ones(2 * 3 * 4, np.float32)
    w[(1 * 3 + 2) * 4 + 1] = np.nan
    layer = PrunedConvLayer(pset4, np.zeros((2, 3), np.uint8), w)
    model = ModelGraph((3, 6, 6), [Conv("conv_a", layer, ConvSpec(3, 3, 1, 1))])
    problems = validate_model(model)
    assert len(problems) == 1
    assert "conv_a" in problems[0] and "filter 1" in problems[0] and "channel 2" in problems[0]


def test_graph_shapes(rng):
    model = two_layer_model(rng, c_in=3, c_mid=8, c_out=6, hw=12)
    assert model.shapes() == [(8, 12, 12), (8, 12, 12), (8, 6, 6), (6, 6, 6)]
    assert [n.name for n in model.convs()] == ["c1", "c2"]
    assert isinstance(model["r1"], ReLU)
    with pytest.raises(ShapeError):
        ModelGraph((3, 12, 12), [Conv("c", random_pruned(rng, 4, 5), ConvSpec(3, 3, 1, 1))])
    with pytest.raises(ValidationError):
        ModelGraph((3, 8, 8), [ReLU("a"), ReLU("a")])


def test_linear_and_pool_shapes(rng):
    model = ModelGraph((2, 8, 8), [MaxPool("p", 2, 2),
                                   Linear("fc", rng.standard_normal((5, 32)).astype(np.float32))])
    assert model.output_shape == (5,)
