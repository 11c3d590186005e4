import numpy as np
import pytest
from hypothesis import given, strategies as st

from structprune import tensor as T
from structprune.errors import ContractError
from structprune.models import Layer, Network, build_network
from structprune.schemes import (LayerMask, MaskSet, Scheme, apply_mask, count_flops, count_params, group_norms,
                                 keep_counts, magnitude_prune, select_structures, top_k)
from structprune.search import Action


def _random_masks(net, rng, p=0.6):
    out = {}
    for i in net.conv_indices():
        m = net.layers[i].matrix()
        f, c = rng.random(m.shape[0]) < p, rng.random(m.shape[1]) < p
        f[rng.integers(m.shape[0])] = True
        c[rng.integers(m.shape[1])] = True
        out[i] = LayerMask(f, c)
    return MaskSet(out)


# -- group norms --------------------------------------------------------------

def test_zero_weight_has_zero_norms():
    for s in Scheme:
        assert not group_norms(np.zeros((3, 2, 3, 3)), s).any()


def test_filter_norm_by_hand():
    w = np.zeros((2, 1, 3, 3))
    w[0, 0, 0, 0], w[0, 0, 0, 1] = 3.0, 4.0
    assert group_norms(w, Scheme.FILTER)[0] == 5.0


def test_norm_shapes_and_column_layout():
    w = np.random.default_rng(0).normal(size=(4, 3, 2, 2))
    assert group_norms(w, "filter").shape == (4,)
    assert group_norms(w, "column").shape == (12,)
    assert group_norms(w, "channel").shape == (3,)
    # column j is GEMM column j: (channel, kernel row, kernel col)
    np.testing.assert_allclose(group_norms(w, "column")[5], np.linalg.norm(w[:, 1, 0, 1]))
    np.testing.assert_allclose(group_norms(w, "column"), np.linalg.norm(w.reshape(4, -1), axis=0))


@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_norms_partition_the_frobenius_norm(cout, cin, k, seed):
    w = np.random.default_rng(seed).normal(size=(cout, cin, k, k))
    total = np.sum(w * w)
    for s in Scheme:
        np.testing.assert_allclose(np.sum(group_norms(w, s) ** 2), total, rtol=1e-12)


def test_fc_is_treated_as_one_by_one_conv():
    w = np.random.default_rng(1).normal(size=(5, 7))
    np.testing.assert_allclose(group_norms(w, "column"), np.linalg.norm(w, axis=0))


# -- selection ----------------------------------------------------------------

def test_top_k_sort_oracle_and_ties():
    np.testing.assert_array_equal(np.flatnonzero(top_k([5, 1, 3, 2], 2)), [0, 2])
    np.testing.assert_array_equal(np.flatnonzero(top_k([1, 1, 1, 1], 2)), [0, 1])
    np.testing.assert_array_equal(np.flatnonzero(top_k([1, 9, 1, 1], 2, alive=np.array([1, 0, 1, 1], bool))),
                                  [0, 2])
    with pytest.raises(ContractError):
        top_k([1, 2], 2, alive=np.array([True, False]))


def test_keep_counts_round_half_up_and_clamp():
    assert keep_counts(16, 9, 2.0, 1.0) == (8, 9)
    assert keep_counts(16, 9, 2.0, 0.0) == (16, 5)  # 4.5 rounds up
    assert keep_counts(4, 4, 100.0, 0.5) == (1, 1)
    assert keep_counts(10, 10, 1.0, 0.3) == (10, 10)


def test_select_structures_filter_then_columns():
    m = np.array([[5.0, 0.0, 1.0], [0.1, 0.1, 0.1], [0.0, 4.0, 0.0]])
    mask = select_structures(m, 2, 2)
    np.testing.assert_array_equal(mask.filters, [True, False, True])
    np.testing.assert_array_equal(mask.columns, [True, True, False])


# -- masks ----------------------------------------------------------------------

def test_all_ones_mask_is_identity():
    net = build_network("convnet-s", 0)
    full = MaskSet({i: LayerMask.full(net.layers[i].out_channels, net.layers[i].width) for i in net.conv_indices()})
    out = apply_mask(net, full)
    for a, b in zip(net.parameters(), out.parameters()):
        np.testing.assert_array_equal(a, b)


def test_masked_filter_emits_its_bias():
    net = build_network("convnet-s", 0)
    net.layers[0].bias = np.linspace(-0.5, 0.5, 16)
    f = np.ones(16, bool)
    f[0] = False
    out = apply_mask(net, MaskSet({0: LayerMask(f, np.ones(9, bool))}))
    y = T.conv2d(np.random.default_rng(0).random((2, 1, 28, 28)), out.layers[0].weight, out.layers[0].bias, pad=1)
    np.testing.assert_array_equal(y.data[:, 0], np.full((2, 28, 28), -0.5))


def test_drop_bias_removes_the_filter_outright():
    net = build_network("convnet-s", 0)
    net.layers[0].bias = np.linspace(-0.5, 0.5, 16)
    f = np.ones(16, bool)
    f[3] = False
    out = apply_mask(net, MaskSet({0: LayerMask(f, np.ones(9, bool))}, drop_bias=True))
    assert out.layers[0].bias[3] == 0.0 and out.layers[0].bias[4] == net.layers[0].bias[4]


def test_apply_mask_is_idempotent_and_sound():
    rng = np.random.default_rng(1)
    net = build_network("convnet-s", 0)
    masks = _random_masks(net, rng)
    once = apply_mask(net, masks)
    twice = apply_mask(once, masks)
    for a, b in zip(once.parameters(), twice.parameters()):
        np.testing.assert_array_equal(a, b)
    for i, m in masks.layers.items():
        w = once.layers[i].matrix()
        orig = net.layers[i].matrix()
        # kept entries untouched, masked entries exactly zero, structures never partial
        np.testing.assert_array_equal(w[m.dense()], orig[m.dense()])
        assert not w[~m.dense()].any()
        assert not w[~m.filters].any() and not w[:, ~m.columns].any()


def test_apply_mask_shape_mismatch():
    net = build_network("convnet-s", 0)
    with pytest.raises(ContractError):
        apply_mask(net, MaskSet({0: LayerMask(np.ones(15, bool), np.ones(9, bool))}))
    with pytest.raises(ContractError):
        apply_mask(net, MaskSet({1: LayerMask(np.ones(1, bool), np.ones(1, bool))}))  # relu layer
    with pytest.raises(ContractError):
        apply_mask(net, MaskSet({0: LayerMask(np.zeros(16, bool), np.ones(9, bool))}))


def test_masks_persist_through_training():
    from structprune.data import synth_dataset
    from structprune.training import train

    ds = synth_dataset(0, 64, 4)
    net = build_network("convnet-s", 0, (1, 16, 16), 4)
    masks = _random_masks(net, np.random.default_rng(2))
    trained, _ = train(apply_mask(net, masks), ds, 1, batch=16)
    for i, m in masks.layers.items():
        assert not trained.layers[i].matrix()[~m.dense()].any()
        assert trained.layers[i].matrix()[m.dense()].all()


# -- counting -------------------------------------------------------------------

def test_convnet_s_dense_count():
    net = build_network("convnet-s", 0)
    c = count_params(net)
    assert c.conv == c.conv_dense == 13968 and c.rate == 1.0


def test_half_filters_everywhere_gives_about_two():
    net = build_network("convnet-s", 0)
    masks = {}
    for i in net.conv_indices():
        n = net.layers[i].out_channels
        f = np.zeros(n, bool)
        f[: (n + 1) // 2] = True
        masks[i] = LayerMask(f, np.ones(net.layers[i].width, bool))
    rate = count_params(net, MaskSet(masks)).rate
    assert 1.9 <= rate <= 2.1


def test_counts_match_brute_recount():
    rng = np.random.default_rng(3)
    net = build_network("vgg-mini", 0)
    masks = _random_masks(net, rng)
    masked = apply_mask(net, masks)
    brute_p = sum(int(masks.get(net, i).dense().sum()) for i in net.conv_indices())
    brute_f = sum(2 * int(masks.get(net, i).dense().sum()) * np.prod(net.output_hw(i)) for i in net.conv_indices())
    assert count_params(masked).conv == brute_p
    assert count_flops(masked).conv == brute_f
    assert count_params(masked).rate >= 1 and count_flops(masked).rate >= 1


def _tiny(cin, cout, k, hw, pad=0):
    conv = Layer("conv", weight=np.ones((cout, cin, k, k)), bias=np.zeros(cout), in_channels=cin, kernel=(k, k),
                 pad=pad)
    ho = hw - k + 1 + 2 * pad
    fc = Layer("fc", weight=np.ones((2, cout * ho * ho)), bias=np.zeros(2), in_channels=cout * ho * ho)
    return Network([conv, Layer("flatten"), fc], (cin, hw, hw), 2)


def test_flops_by_hand():
    assert count_flops(_tiny(1, 2, 3, 6)).conv == 2 * 2 * 9 * 16 == 576
    net = _tiny(5, 3, 1, 7)
    assert count_flops(net).conv == 2 * 3 * 5 * 7 * 7
    net = _tiny(2, 2, 3, 6)
    half = np.zeros(18, bool)
    half[:9] = True
    assert count_flops(net, MaskSet({0: LayerMask(np.ones(2, bool), half)})).conv == count_flops(net).conv // 2


# -- magnitude pruning ------------------------------------------------------------

def test_rate_one_gives_full_masks():
    net = build_network("convnet-s", 0)
    masks = magnitude_prune(net, Action.uniform(net, 1.0, 0.5))
    for i in net.conv_indices():
        assert masks.layers[i].filters.all() and masks.layers[i].columns.all()


def test_magnitude_prune_keeps_largest_filters():
    net = _tiny(1, 4, 1, 3)
    net.layers[0].weight = np.array([5.0, 1.0, 3.0, 2.0]).reshape(4, 1, 1, 1)
    masks = magnitude_prune(net, Action([0], [2.0], [1.0]))
    np.testing.assert_array_equal(np.flatnonzero(masks.layers[0].filters), [0, 2])
    net.layers[0].weight = np.ones((4, 1, 1, 1))
    masks = magnitude_prune(net, Action([0], [2.0], [1.0]))
    np.testing.assert_array_equal(np.flatnonzero(masks.layers[0].filters), [0, 1])


def test_magnitude_prune_respects_existing_masks():
    rng = np.random.default_rng(4)
    net = build_network("convnet-s", 0)
    masks = _random_masks(net, rng, p=0.8)
    masked = apply_mask(net, masks)
    new = magnitude_prune(masked, Action.uniform(masked, 1.5, 0.5))
    for i in net.conv_indices():
        assert not np.any(new.layers[i].filters & ~masks.layers[i].filters)
        assert not np.any(new.layers[i].columns & ~masks.layers[i].columns)
