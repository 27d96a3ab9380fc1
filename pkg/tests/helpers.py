"""Builders shared by the test modules."""

from patconv import (Conv, ConvSpec, DenseConvLayer, MaxPool, ModelGraph, ReLU, Tensor4D,
                     extended_pattern_set, prune_layer)


def random_pruned(rng, filters, channels, k=4, keep=0.5, balanced=True):
    dense = DenseConvLayer.random(filters, channels, 3, 3, rng, bias=True)
    return prune_layer(dense, extended_pattern_set(k), keep, balanced=balanced)


def two_layer_model(rng, c_in=3, c_mid=8, c_out=6, hw=12, k=4, keep=0.5):
    l1 = random_pruned(rng, c_mid, c_in, k, keep if c_in > 1 else 1.0)
    l2 = random_pruned(rng, c_out, c_mid, k, keep)
    spec = ConvSpec(3, 3, 1, 1)
    return ModelGraph((c_in, hw, hw), [Conv("c1", l1, spec), ReLU("r1"),
                                       MaxPool("p1", 2, 2), Conv("c2", l2, spec)])


def random_input(rng, shape):
    return Tensor4D.random(shape, rng)
