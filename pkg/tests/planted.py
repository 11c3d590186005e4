"""Planted-redundancy fixture.

A narrow convnet is trained, then widened: every conv layer gets as many
extra filters again, with tiny weights (norm ~1e-6) and zero bias, and the
consuming layer reads them through all-zero weights. The wide network computes
exactly the narrow network's function, so the known-optimal pruning removes
precisely the planted filters (and the dead columns that read them).
"""

import functools

import numpy as np

from structprune.data import digits_dataset
from structprune.models import Layer, Network, network_from_plan
from structprune.search import Action
from structprune.training import train

NARROW = [("conv", 8), ("relu",), ("maxpool",), ("conv", 16), ("relu",), ("maxpool",),
          ("conv", 16), ("relu",), ("flatten",), ("fc", 32), ("relu",)]


def widen(net, factor=2, scale=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    layers = [Layer(l.kind, weight=None if l.weight is None else l.weight.copy(),
                    bias=None if l.bias is None else l.bias.copy(), in_channels=l.in_channels, kernel=l.kernel,
                    stride=l.stride, pad=l.pad, size=l.size) for l in net.layers]
    shapes = net.shapes()
    extra_in = 0  # planted channels feeding the current layer
    for i, layer in enumerate(layers):
        if not layer.weighted:
            continue
        if layer.kind == "conv":
            cout, cin, kh, kw = layer.weight.shape
            w = np.zeros((cout, cin + extra_in, kh, kw))
            w[:, :cin] = layer.weight
            planted = rng.normal(size=((factor - 1) * cout, cin + extra_in, kh, kw))
            planted *= scale / np.linalg.norm(planted.reshape(len(planted), -1), axis=1)[:, None, None, None]
            layer.weight = np.concatenate([w, planted])
            layer.bias = np.concatenate([layer.bias, np.zeros((factor - 1) * cout)])
            layer.in_channels = cin + extra_in
            extra_in = (factor - 1) * cout
        else:
            flat = next((k for k in range(i - 1, -1, -1) if layers[k].kind == "flatten"), None)
            if extra_in and flat is not None:
                c, h, w_ = shapes[flat]
                block = h * w_
                weight = np.zeros((layer.weight.shape[0], (c + extra_in) * block))
                weight[:, : c * block] = layer.weight
                layer.weight = weight
                layer.in_channels = (c + extra_in) * block
            extra_in = 0
    return Network(layers, net.input_shape, net.num_classes, arch="planted")


def planted_action(net):
    """Filter-only rate 2 in every conv layer: removes exactly the planted filters."""
    idx = net.prunable_indices()
    return Action(idx, [2.0] * len(idx), [1.0] * len(idx))


@functools.lru_cache(maxsize=None)
def planted_fixture(seed=0, epochs=8):
    """``(narrow, wide, train_set, test_set)`` on 16 x 16 digits (10 classes:
    hard enough that careless pruning visibly hurts). Cached: training takes ~10 s."""
    train_set, test_set = digits_dataset(16).split_off(0.3, seed=seed)
    narrow = network_from_plan(NARROW, (1, 16, 16), 10, seed=seed, arch="narrow")
    narrow, _ = train(narrow, train_set, epochs, batch=32, seed=seed)
    return narrow, widen(narrow, seed=seed), train_set, test_set
