import numpy as np
import pytest

from structprune.data import DatasetHandle, synth_dataset
from structprune.errors import ConfigError, ShapeError
from structprune.models import ARCHS, Layer, Network, build_network, reinitialize
from structprune.schemes import count_params
from structprune.training import evaluate_accuracy, predict, train


@pytest.fixture(scope="module")
def synth_split():
    ds = synth_dataset(11, 1000, 4)
    return ds.split_off(0.25, seed=1)


def test_same_seed_is_bit_identical():
    a, b = build_network("convnet-s", 3), build_network("convnet-s", 3)
    for x, y in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x, y)


def test_different_seeds_differ():
    a, b = build_network("convnet-s", 3), build_network("convnet-s", 4)
    assert any(not np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_convnet_s_conv_param_count():
    net = build_network("convnet-s", 0, (1, 28, 28), 10)
    assert 16 * 1 * 9 + 32 * 16 * 9 + 32 * 32 * 9 == 13968
    assert count_params(net).conv == 13968


def test_shapes_compose_for_every_arch():
    for arch in ARCHS:
        net = build_network(arch, 0, (1, 28, 28), 10)
        shapes = net.shapes()
        assert shapes[-1] == (10,)
        out = net.forward(np.zeros((2, 1, 28, 28)))
        assert out.shape == (2, 10)


def test_unknown_arch():
    with pytest.raises(ConfigError):
        build_network("resnet-1000", 0)


def test_network_invariants():
    conv = Layer("conv", weight=np.zeros((2, 1, 3, 3)), bias=np.zeros(2), in_channels=1, kernel=(3, 3), pad=1)
    fc = Layer("fc", weight=np.zeros((3, 2 * 4 * 4)), bias=np.zeros(3), in_channels=32)
    Network([conv, Layer("flatten"), fc], (1, 4, 4), 3)
    with pytest.raises(ConfigError):  # no conv layer
        Network([Layer("flatten"), Layer("fc", weight=np.zeros((3, 16)), bias=np.zeros(3), in_channels=16)],
                (1, 4, 4), 3)
    with pytest.raises(ConfigError):  # class count mismatch
        Network([conv, Layer("flatten"), fc], (1, 4, 4), 4)
    with pytest.raises(ShapeError):  # shapes do not compose
        Network([conv, Layer("flatten"), fc], (1, 5, 5), 3)


def test_synth_training_smoke(synth_split):
    train_set, test_set = synth_split
    net = build_network("convnet-s", 0, (1, 16, 16), 4)
    trained, history = train(net, train_set, 3, batch=32, seed=0)
    assert len(history) == 3
    assert evaluate_accuracy(trained, test_set) >= 0.95


def test_zero_learning_rate_changes_nothing(synth_split):
    net = build_network("convnet-s", 0, (1, 16, 16), 4)
    trained, _ = train(net, synth_split[0].head(64), 1, lr=0.0)
    for a, b in zip(net.parameters(), trained.parameters()):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic(synth_split):
    net = build_network("convnet-s", 0, (1, 16, 16), 4)
    a, ha = train(net, synth_split[0].head(128), 2, seed=5)
    b, hb = train(net, synth_split[0].head(128), 2, seed=5)
    assert ha == hb
    for x, y in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x, y)


def test_constant_logits_pick_the_first_class():
    net = build_network("convnet-s", 0, (1, 16, 16), 4)
    for i in net.weighted_indices():
        net.layers[i].weight = np.zeros_like(net.layers[i].weight)
    net.layers[-1].bias = np.full(4, 0.25)
    labels = np.array([0, 1, 2, 0, 3, 0, 2, 2])
    ds = DatasetHandle(np.random.default_rng(0).random((8, 1, 16, 16)), labels, num_classes=4)
    assert evaluate_accuracy(net, ds) == np.mean(labels == 0)


def test_memorises_ten_samples():
    ds = synth_dataset(2, 10, 4)
    net = build_network("convnet-s", 1, (1, 16, 16), 4)
    trained, _ = train(net, ds, 40, batch=10, lr=3e-3)
    assert evaluate_accuracy(trained, ds) == 1.0


def test_accuracy_matches_manual_count_and_ignores_order():
    ds = synth_dataset(3, 20, 4)
    net = build_network("convnet-s", 2, (1, 16, 16), 4)
    logits = net.forward(ds.images).data
    manual = 0
    for row, y in zip(logits, ds.labels):
        best = 0
        for k in range(1, len(row)):
            if row[k] > row[best]:
                best = k
        manual += best == y
    assert evaluate_accuracy(net, ds) == manual / 20
    perm = np.random.default_rng(0).permutation(20)
    assert evaluate_accuracy(net, ds.subset(perm)) == manual / 20
    np.testing.assert_array_equal(predict(net, ds.images), np.argmax(logits, axis=1))


def test_reinitialize_keeps_structure_and_changes_values():
    net = build_network("convnet-s", 0)
    fresh = reinitialize(net, 9)
    for a, b in zip(net.parameters(), fresh.parameters()):
        assert a.shape == b.shape
    assert not np.array_equal(net.layers[0].weight, fresh.layers[0].weight)
    assert not any(b.any() for b in fresh.parameters()[1::2])
