"""Removal of weak structures after ADMM pruning, propagation of removals
between layers, and physical shrinking of the network.

Propagation runs both ways until nothing changes:

* a removed filter (with zero bias) produces an all-zero map after relu and
  pooling, so the consumer's columns reading that map can go;
* a map whose every consumer column is gone is unused, so the producing
  filter can go.

Both steps leave the network function unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .models import Layer, Network
from .schemes import LayerMask, MaskSet, count_params, layer_mask, zero_masked
from .search import SAConfig, anneal
from .training import evaluate_accuracy

log = logging.getLogger(__name__)

LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class PurifyConfig:
    """Per-layer ``(tau_col, tau_filt)`` thresholds on structure L2 norms."""

    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, pair in self.thresholds.items():
            if len(pair) != 2 or not all(math.isfinite(t) and t >= 0 for t in pair):
                raise ContractError(f"layer {i}: thresholds must be two finite non-negative numbers")


def _drop_below(norms, tau, alive):
    alive = np.ones(norms.size, dtype=bool) if alive is None else alive
    drop = alive & (norms < tau)
    if drop.sum() == alive.sum() and alive.any():
        # never remove the last live structure: spare the strongest one
        keep = np.flatnonzero(alive)[np.argmax(norms[alive])]
        drop[keep] = False
    return drop


def purify_layer(w, tau_col, tau_filt, alive=None):
    """Indices of filters and columns whose L2 norm is strictly below the
    threshold. Norms are taken on ``w`` as given; already-removed structures
    (``alive`` False) are not reported again."""
    if not (math.isfinite(tau_col) and math.isfinite(tau_filt)):
        raise ContractError("thresholds must be finite")
    m = np.asarray(w, dtype=np.float64)
    m = m.reshape(m.shape[0], -1)
    f_norms = np.sqrt((m * m).sum(axis=1))
    c_norms = np.sqrt((m * m).sum(axis=0))
    f = _drop_below(f_norms, tau_filt, None if alive is None else alive.filters)
    c = _drop_below(c_norms, tau_col, None if alive is None else alive.columns)
    return np.flatnonzero(f), np.flatnonzero(c)


def column_sources(network, index):
    """For each current GEMM column of layer ``index``, the output channel of
    the previous weighted layer that feeds it. None for the first layer."""
    producer = _producer(network, index)
    if producer is None:
        return None
    layer = network.layers[index]
    cols = np.arange(layer.full_width) if layer.columns is None else np.asarray(layer.columns)
    if layer.kind == "conv":
        return cols // (layer.kernel[0] * layer.kernel[1])
    flat = next((k for k in range(producer + 1, index) if network.layers[k].kind == "flatten"), None)
    if flat is None:
        return cols
    c, h, w = network.shapes()[flat]
    return cols // (h * w)


def _producer(network, index):
    for j in range(index - 1, -1, -1):
        if network.layers[j].weighted:
            return j
    return None


def propagate_removal(network, index, removed_filters):
    """Consumer column indices made dead by removing ``removed_filters`` of
    layer ``index``. Returns ``(consumer_index, columns)``."""
    removed = np.asarray(sorted(removed_filters), dtype=np.intp)
    consumer = network.consumer(index)
    if consumer is None:
        raise ContractError(f"layer {index} has no consumer layer")
    if removed.size == 0:
        return consumer, removed
    bias = network.layers[index].bias[removed]
    if np.any(bias != 0):
        raise ContractError(f"layer {index}: removed filters {removed[bias != 0].tolist()} have non-zero bias")
    src = column_sources(network, consumer)
    return consumer, np.flatnonzero(np.isin(src, removed))


def _fresh_masks(network):
    out = {}
    for i in network.weighted_indices():
        m = layer_mask(network, i)
        out[i] = LayerMask(m.filters.copy(), m.columns.copy())
    return out


def propagate_masks(network):
    """Copy of ``network`` with removals propagated to a fixed point and the
    biases of removed filters set to zero."""
    net = network.clone()
    masks = _fresh_masks(net)
    changed = True
    while changed:
        changed = False
        for i in net.weighted_indices():
            consumer = net.consumer(i)
            if consumer is None:
                continue
            m, mc = masks[i], masks[consumer]
            net.layers[i].bias = np.where(m.filters, net.layers[i].bias, 0.0)
            src = column_sources(net, consumer)
            dead_cols = mc.columns & ~m.filters[src]
            if dead_cols.any():
                if dead_cols.sum() == mc.columns.sum():
                    # every live column reads a removed map: keep one column on a
                    # live map instead (both are all-zero, so nothing changes)
                    mc.columns[:] = False
                    mc.columns[np.flatnonzero(m.filters[src])[0]] = True
                else:
                    mc.columns &= ~dead_cols
                changed = True
            used = np.zeros_like(m.filters)
            used[src[mc.columns]] = True
            unused = m.filters & ~used
            if unused.any():
                m.filters &= ~unused
                net.layers[i].bias = np.where(m.filters, net.layers[i].bias, 0.0)
                changed = True
    net.masks = MaskSet(masks, drop_bias=True)
    return zero_masked(net)


def purify(network, config):
    """Apply thresholds, then propagate. Returns the masked network."""
    net = network.clone()
    masks = _fresh_masks(net)
    for i, (tau_col, tau_filt) in config.thresholds.items():
        rf, rc = purify_layer(net.layers[i].weight, tau_col, tau_filt, alive=masks[i])
        masks[i].filters[rf] = False
        masks[i].columns[rc] = False
    net.masks = MaskSet(masks, drop_bias=True)
    return propagate_masks(zero_masked(net))


def check_consistent(network):
    for i in network.weighted_indices():
        consumer = network.consumer(i)
        if consumer is None:
            continue
        m, mc = layer_mask(network, i), layer_mask(network, consumer)
        if np.any(network.layers[i].bias[~m.filters] != 0):
            raise ContractError(f"layer {i}: removed filters still carry a bias")
        src = column_sources(network, consumer)
        if np.any(mc.columns & ~m.filters[src]):
            raise ContractError(f"layer {consumer}: live columns read channels removed in layer {i}")


def shrink_network(network):
    """Physically drop masked filters, channels and columns.

    The masks must already be propagated (see :func:`propagate_masks`).
    Returns an unmasked network whose layers hold only the kept weights.
    """
    check_consistent(network)
    shapes = network.shapes()
    layers = []
    remap = None  # old channel index -> new index for the current layer's input
    for i, layer in enumerate(network.layers):
        if not layer.weighted:
            layers.append(Layer(layer.kind, stride=layer.stride, pad=layer.pad, size=layer.size))
            continue
        m = layer_mask(network, i)
        cols_now = np.arange(layer.full_width) if layer.columns is None else np.asarray(layer.columns)
        kept = cols_now[m.columns]
        khkw = layer.kernel[0] * layer.kernel[1]
        if remap is None:
            new_in = layer.in_channels
            new_cols = kept
        else:
            src = column_sources(network, i)[m.columns]
            if layer.kind == "conv":
                new_in = int(remap.max() + 1) if remap.size else 0
                new_cols = remap[src] * khkw + kept % khkw
            else:
                flat = next((k for k in range(i) if network.layers[k].kind == "flatten"
                             and _producer(network, i) < k), None)
                if flat is None:
                    new_in = int((remap >= 0).sum())
                    new_cols = remap[src]
                else:
                    c, h, w = shapes[flat]
                    new_in = int((remap >= 0).sum()) * h * w
                    new_cols = remap[src] * h * w + kept % (h * w)
        weight = layer.matrix()[np.ix_(m.filters, m.columns)]
        full = new_in * khkw if layer.kind == "conv" else new_in
        if len(new_cols) == full and np.array_equal(new_cols, np.arange(full)):
            columns = None
            if layer.kind == "conv":
                weight = weight.reshape(-1, new_in, *layer.kernel)
        else:
            columns = np.asarray(new_cols, dtype=np.intp)
        layers.append(Layer(layer.kind, weight=np.ascontiguousarray(weight), bias=layer.bias[m.filters].copy(),
                            in_channels=new_in, kernel=layer.kernel, stride=layer.stride, pad=layer.pad,
                            columns=columns))
        remap = np.full(layer.out_channels, -1, dtype=np.intp)
        remap[m.filters] = np.arange(int(m.filters.sum()))
    return Network(layers, network.input_shape, network.num_classes, arch=network.arch)


def level_threshold(norms, level, alive=None):
    """Threshold that removes about ``level`` of the live structures: the
    midpoint between the m-th and (m+1)-th smallest norm, m = round(level*n).

    A threshold cannot split (near-)equal norms, so when m falls inside a tie
    the whole tied group is removed; if that group runs to the largest norm,
    it is kept instead.
    """
    norms = np.asarray(norms, dtype=np.float64)
    if alive is not None:
        norms = norms[alive]
    s = np.sort(norms)
    m = int(np.floor(level * len(s) + 0.5))
    if m <= 0:
        return 0.0
    m = min(m, len(s) - 1)
    tied = lambda j: np.isclose(s[j - 1], s[j], rtol=1e-9, atol=0.0)
    up = m
    while up < len(s) and tied(up):
        up += 1
    if up == len(s):
        while m > 0 and tied(m):
            m -= 1
        if m == 0:
            return 0.0
    else:
        m = up
    return float(0.5 * (s[m - 1] + s[m]))


def thresholds_for(network, levels):
    """PurifyConfig from per-layer ``(column_level, filter_level)`` indices into LEVELS."""
    out = {}
    for i, (qc, qf) in levels.items():
        m = layer_mask(network, i)
        w = network.layers[i].matrix()
        out[i] = (
            level_threshold(np.sqrt((w * w).sum(axis=0)), LEVELS[qc], m.columns),
            level_threshold(np.sqrt((w * w).sum(axis=1)), LEVELS[qf], m.filters),
        )
    return PurifyConfig(out)


@dataclass
class ThresholdSearch:
    config: PurifyConfig
    reference_accuracy: float
    accuracy: float
    reduction: float
    result: object = None


def search_thresholds(network, dataset, epsilon=0.002, sa_config=None, scheme="combined", min_params=0):
    """Anneal over per-layer threshold levels to remove as many extra conv
    weights as possible while accuracy on ``dataset`` stays within
    ``epsilon`` of the unpurified network's. Falls back to all-zero
    thresholds when nothing feasible beats them.

    ``scheme`` "filter" searches filter thresholds only (column thresholds
    stay 0), "column" the reverse, so a single-scheme run stays single-scheme.
    Candidates leaving fewer than ``min_params`` conv weights are infeasible
    too (a rate budget).
    """
    sa_config = sa_config or SAConfig(iterations=6)
    halves = {"combined": (0, 1), "column": (0,), "filter": (1,)}[scheme]
    rng = np.random.default_rng(sa_config.seed)
    layers = network.prunable_indices()
    ref = evaluate_accuracy(network, dataset)
    before = count_params(propagate_masks(network)).conv
    evals = {}

    def measure(levels):
        if levels not in evals:
            cfg = thresholds_for(network, dict(zip(layers, levels)))
            pur = purify(network, cfg)
            acc = evaluate_accuracy(pur, dataset)
            kept = count_params(pur).conv
            evals[levels] = (acc, 1.0 - kept / before, max(min_params - kept, 0) / before)
        return evals[levels]

    def score(levels):
        # feasible: the extra reduction; infeasible: minus the excess accuracy
        # loss, so the chain is steered back towards the constraint
        acc, red, over = measure(levels)
        excess = max((ref - epsilon) - acc, 0.0) + over
        return red if excess <= 1e-12 else -excess

    def neighbour(levels, temp, t0, rng):
        out = list(levels)
        span = 2 if rng.random() < min(temp / t0, 1.0) else 1
        for j in rng.choice(len(layers), size=math.ceil(len(layers) / 3), replace=False):
            qc_qf = list(out[j])
            half = halves[int(rng.integers(len(halves)))]  # move the column or the filter level
            step = int(rng.integers(1, span + 1)) * (1 if rng.random() < 0.5 else -1)
            qc_qf[half] = int(np.clip(qc_qf[half] + step, 0, len(LEVELS) - 1))
            out[j] = tuple(qc_qf)
        return tuple(out)

    start = tuple((0, 0) for _ in layers)
    result = anneal(start, score, neighbour, sa_config, rng)
    best = result.best if result.best_score >= 0 else start
    acc, red, _ = measure(best)
    log.info("purification search: reduction %.3f accuracy %.4f (reference %.4f)", red, acc, ref)
    return ThresholdSearch(thresholds_for(network, dict(zip(layers, best))), ref, acc, red, result)
