"""Structure groupings over layer weights, structure masks, and params/FLOPs accounting.

In the GEMM view a weighted layer is an ``out x width`` matrix. A filter is a
row, a column is one (channel, kernel-row, kernel-col) position shared by every
filter, and a channel is the block of ``kh*kw`` columns fed by one input map.
fc layers are handled as 1x1 convolutions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


class Scheme(enum.Enum):
    FILTER = "filter"
    CHANNEL = "channel"
    COLUMN = "column"


def _as_conv4(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        return w[:, :, None, None]
    if w.ndim != 4:
        raise ContractError(f"expected a conv or fc weight, got shape {w.shape}")
    return w


def group_norms(w, scheme):
    """L2 norm of every structure of ``w`` under ``scheme``."""
    w4 = _as_conv4(w)
    scheme = Scheme(scheme)
    sq = w4 * w4
    if scheme is Scheme.FILTER:
        return np.sqrt(sq.sum(axis=(1, 2, 3)))
    if scheme is Scheme.COLUMN:
        return np.sqrt(sq.sum(axis=0)).reshape(-1)
    return np.sqrt(sq.sum(axis=(0, 2, 3)))


def top_k(norms, k, alive=None):
    """Boolean mask of the ``k`` largest norms among ``alive``; ties go to the
    lower index."""
    norms = np.asarray(norms, dtype=np.float64)
    if alive is not None:
        if k > int(np.count_nonzero(alive)):
            raise ContractError(f"cannot keep {k} of {int(np.count_nonzero(alive))} live structures")
        norms = np.where(alive, norms, -np.inf)
    if not 0 <= k <= norms.size:
        raise ContractError(f"keep count {k} outside [0, {norms.size}]")
    keep = np.zeros(norms.size, dtype=bool)
    keep[np.argsort(-norms, kind="stable")[:k]] = True
    return keep


@dataclass
class LayerMask:
    filters: np.ndarray
    columns: np.ndarray

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=bool)
        self.columns = np.asarray(self.columns, dtype=bool)

    @classmethod
    def full(cls, n_filters, n_columns):
        return cls(np.ones(n_filters, dtype=bool), np.ones(n_columns, dtype=bool))

    def dense(self):
        """Per-entry mask of the GEMM matrix: filter AND column."""
        return np.logical_and.outer(self.filters, self.columns)

    @property
    def kept(self):
        return int(self.filters.sum()) * int(self.columns.sum())

    def __and__(self, other):
        return LayerMask(self.filters & other.filters, self.columns & other.columns)

    def __eq__(self, other):
        return (
            isinstance(other, LayerMask)
            and np.array_equal(self.filters, other.filters)
            and np.array_equal(self.columns, other.columns)
        )


@dataclass
class MaskSet:
    """Structure masks keyed by layer index; absent layers are unmasked.

    With ``drop_bias`` a masked filter also loses its bias, i.e. the filter is
    removed outright and its output map is exactly zero. Without it only the
    weights are masked and the map is the constant bias (after activation).
    """

    layers: dict = field(default_factory=dict)
    drop_bias: bool = False

    def get(self, network, index):
        m = self.layers.get(index)
        if m is None:
            layer = network.layers[index]
            return LayerMask.full(layer.out_channels, layer.width)
        return m

    def merged(self, other):
        out = {k: LayerMask(v.filters.copy(), v.columns.copy()) for k, v in self.layers.items()}
        for k, v in other.layers.items():
            out[k] = out[k] & v if k in out else LayerMask(v.filters.copy(), v.columns.copy())
        return MaskSet(out, self.drop_bias or other.drop_bias)

    def __eq__(self, other):
        return isinstance(other, MaskSet) and self.drop_bias == other.drop_bias and self.layers.keys() == other.layers.keys() and all(
            self.layers[k] == other.layers[k] for k in self.layers
        )


def layer_mask(network, index):
    masks = network.masks if network.masks is not None else MaskSet()
    return masks.get(network, index)


def check_masks(network, maskset):
    for i, m in maskset.layers.items():
        if i >= len(network.layers) or not network.layers[i].weighted:
            raise ContractError(f"mask for layer {i}, which has no weights")
        layer = network.layers[i]
        if m.filters.shape != (layer.out_channels,) or m.columns.shape != (layer.width,):
            raise ContractError(
                f"layer {i}: mask shapes {m.filters.shape}/{m.columns.shape} do not match "
                f"{layer.out_channels} filters x {layer.width} columns"
            )
        if not m.filters.any() or not m.columns.any():
            raise ContractError(f"layer {i}: a mask must keep at least one filter and one column")


def zero_masked(network):
    """Re-zero masked weight entries (and, with ``drop_bias``, the biases of
    masked filters) in place."""
    if network.masks is None:
        return network
    for i, m in network.masks.layers.items():
        layer = network.layers[i]
        layer.weight = (layer.matrix() * m.dense()).reshape(layer.weight.shape)
        if network.masks.drop_bias:
            layer.bias = np.where(m.filters, layer.bias, 0.0)
    return network


def apply_mask(network, maskset):
    """Copy of ``network`` with ``maskset`` merged into its masks and the
    masked weights zeroed. Training honours the stored masks afterwards."""
    check_masks(network, maskset)
    net = network.clone()
    net.masks = maskset if net.masks is None else net.masks.merged(maskset)
    return zero_masked(net)


@dataclass(frozen=True)
class Count:
    conv: int
    total: int
    conv_dense: int
    total_dense: int

    @property
    def rate(self):
        return self.conv_dense / self.conv

    @property
    def total_rate(self):
        return self.total_dense / self.total


def _count(network, maskset, per_entry):
    maskset = network.masks if maskset is None else maskset
    maskset = maskset if maskset is not None else MaskSet()
    conv = total = conv_dense = total_dense = 0
    for i in network.weighted_indices():
        layer = network.layers[i]
        m = maskset.get(network, i)
        scale = per_entry(network, i)
        kept = m.kept * scale
        dense = layer.out_channels * layer.width * scale
        total += kept
        total_dense += dense
        if layer.kind == "conv":
            conv += kept
            conv_dense += dense
    return Count(conv, total, conv_dense, total_dense)


def count_params(network, maskset=None):
    """Unmasked weight entries (biases excluded). ``maskset`` defaults to the
    network's own masks."""
    return _count(network, maskset, lambda net, i: 1)


def count_flops(network, maskset=None):
    """Forward FLOPs of the weighted layers, two per multiply-accumulate."""

    def per_entry(net, i):
        ho, wo = net.output_hw(i)
        return 2 * ho * wo

    return _count(network, maskset, per_entry)


def layer_cost(network, index, objective):
    """Cost of one kept weight entry of a layer under ``objective``."""
    if objective == "params":
        return 1
    if objective == "flops":
        ho, wo = network.output_hw(index)
        return 2 * ho * wo
    raise ContractError(f"unknown objective {objective!r}")


def keep_counts(n_filters, n_columns, rate, split):
    """Integer keep counts that realise a layer ``rate`` with a fraction
    ``split`` of its log-rate spent on filters (round half up, at least one)."""
    kf = int(np.floor(n_filters / rate**split + 0.5))
    kc = int(np.floor(n_columns / rate ** (1.0 - split) + 0.5))
    return min(max(kf, 1), n_filters), min(max(kc, 1), n_columns)


def select_structures(matrix, keep_filters, keep_columns, alive=None):
    """Keep the strongest filters, then the strongest columns of what remains.

    Column norms are taken after the filter step. Returns a :class:`LayerMask`.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    n_f, n_c = matrix.shape
    if not (1 <= keep_filters <= n_f and 1 <= keep_columns <= n_c):
        raise ContractError(f"keep counts ({keep_filters}, {keep_columns}) invalid for a {n_f} x {n_c} matrix")
    alive_f = None if alive is None else alive.filters
    alive_c = None if alive is None else alive.columns
    filters = top_k(np.sqrt((matrix * matrix).sum(axis=1)), keep_filters, alive_f)
    kept = matrix[filters]
    columns = top_k(np.sqrt((kept * kept).sum(axis=0)), keep_columns, alive_c)
    return LayerMask(filters, columns)


def magnitude_prune(network, action, drop_bias=False):
    """Masks that keep the largest-norm structures of each action layer at the
    action's rate and scheme split. Previously masked structures stay masked."""
    out = {}
    for i, rate, split in zip(action.layers, action.rates, action.splits):
        layer = network.layers[i]
        cur = layer_mask(network, i)
        kf, kc = keep_counts(int(cur.filters.sum()), int(cur.columns.sum()), rate, split)
        out[i] = select_structures(layer.matrix(), kf, kc, alive=cur)
    return MaskSet(out, drop_bias)
