"""ADMM regularization toward structure-count constraints, then hard pruning
and masked retraining.

Scaled-form iteration per prunable layer ``i``::

    W    <- argmin f(W) + sum_i rho_i/2 ||W_i - Z_i + U_i||^2   (Adam epochs)
    Z_i  <- project(W_i + U_i)
    U_i  <- U_i + W_i - Z_i
    rho_i grows by a constant factor every ``rho_period`` iterations
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .schemes import apply_mask, keep_counts, layer_mask, select_structures, MaskSet
from .seeding import derive_seed
from .training import evaluate_accuracy, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StructureConstraint:
    keep_filters: int
    keep_columns: int


@dataclass
class ADMMConfig:
    rho0: float = 1e-4
    rho_growth: float = 1.5
    rho_period: int = 3
    iterations: int = 9
    epochs_per_iteration: int = 4
    retrain_epochs: int = 8
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    # remove pruned filters' biases at hard pruning instead of keeping them
    # trainable until purification zeroes them
    drop_pruned_bias: bool = False

    def __post_init__(self):
        if self.rho0 <= 0 or self.rho_growth < 1 or self.rho_period < 1:
            raise ContractError("rho0 must be positive, growth >= 1, period >= 1")
        if self.iterations < 1 or self.epochs_per_iteration < 1 or self.retrain_epochs < 0:
            raise ContractError("iteration and epoch counts must be positive")


@dataclass
class ADMMState:
    Z: dict
    U: dict
    rho: dict
    constraints: dict
    masks: dict
    k: int = 0
    history: list = field(default_factory=list)


def euclidean_project(w, constraint, alive=None, return_mask=False):
    """Nearest tensor (Frobenius) to ``w`` keeping ``constraint.keep_filters``
    filters and ``constraint.keep_columns`` columns.

    Exact when only one scheme is constrained. With both, the filter step runs
    first and columns are ranked on the surviving filters.
    """
    w = np.asarray(w, dtype=np.float64)
    matrix = w.reshape(w.shape[0], -1)
    n_f, n_c = matrix.shape
    if not (1 <= constraint.keep_filters <= n_f and 1 <= constraint.keep_columns <= n_c):
        raise ContractError(f"constraint {constraint} does not fit a {n_f} x {n_c} weight")
    mask = select_structures(matrix, constraint.keep_filters, constraint.keep_columns, alive)
    z = (matrix * mask.dense()).reshape(w.shape)
    return (z, mask) if return_mask else z


def dual_update(u, w, z):
    return u + (w - z)


def multi_rho_update(rho, k, config):
    """Penalty after iteration ``k`` (1-based): grows on period boundaries."""
    if k < 1:
        raise ContractError("iteration index starts at 1")
    return rho * config.rho_growth if k % config.rho_period == 0 else rho


def constraints_for(network, action):
    out = {}
    for i, rate, split in zip(action.layers, action.rates, action.splits):
        cur = layer_mask(network, i)
        kf, kc = keep_counts(int(cur.filters.sum()), int(cur.columns.sum()), rate, split)
        out[i] = StructureConstraint(kf, kc)
    return out


def penalty(weights, state):
    """sum_i rho_i/2 ||W_i - Z_i + U_i||^2 on tracked (or plain) weights."""
    total = 0.0
    for i, w in weights.items():
        if i in state.Z:
            total = total + (state.rho[i] / 2.0) * T.sum_squares(T.sub(w, state.Z[i] - state.U[i]))
    return total


def augmented_loss(network, state, images, labels):
    """Data loss plus the ADMM penalty, evaluated without a tape."""
    f = T.softmax_cross_entropy(network.forward(images), labels)
    weights = {i: network.layers[i].weight for i in state.Z}
    return float((f + penalty(weights, state)).data)


def init_state(network, constraints, config):
    Z, U, rho, masks = {}, {}, {}, {}
    for i, c in constraints.items():
        w = network.layers[i].weight
        Z[i], masks[i] = euclidean_project(w, c, alive=layer_mask(network, i), return_mask=True)
        U[i] = np.zeros_like(w)
        rho[i] = config.rho0
    return ADMMState(Z, U, rho, dict(constraints), masks)


def relative_residuals(network, state):
    out = {}
    for i, z in state.Z.items():
        w = network.layers[i].weight
        out[i] = float(np.linalg.norm(w - z) / max(np.linalg.norm(w), 1e-300))
    return out


def admm_regularize(network, action, dataset, config=None):
    """Run the ADMM iterations for ``action``'s per-layer constraints.

    Returns ``(network, state, history)``; each history record carries the
    iteration, last-epoch data loss, absolute and relative ``||W - Z||_F`` per
    layer, and the penalties used.
    """
    config = config or ADMMConfig()
    net = network.clone()
    state = init_state(net, constraints_for(net, action), config)
    for k in range(1, config.iterations + 1):
        rho_used = dict(state.rho)
        net, losses = train(
            net,
            dataset,
            config.epochs_per_iteration,
            lr=config.lr,
            batch=config.batch,
            seed=derive_seed(config.seed, f"admm-{k}"),
            regularizer=lambda weights: penalty(weights, state),
            iteration=k,
        )
        residual = {}
        for i, c in state.constraints.items():
            w = net.layers[i].weight
            state.Z[i], state.masks[i] = euclidean_project(
                w + state.U[i], c, alive=layer_mask(net, i), return_mask=True
            )
            state.U[i] = dual_update(state.U[i], w, state.Z[i])
            residual[i] = float(np.linalg.norm(w - state.Z[i]))
            state.rho[i] = multi_rho_update(state.rho[i], k, config)
        state.k = k
        record = {
            "iteration": k,
            "loss": losses[-1],
            "residual": residual,
            "relative_residual": relative_residuals(net, state),
            "rho": rho_used,
        }
        state.history.append(record)
        log.info("admm k=%d loss=%.4f rel=%s", k, losses[-1],
                 {i: round(v, 4) for i, v in record["relative_residual"].items()})
    return net, state, state.history


def hard_prune_retrain(network, state, dataset, test_set, config=None):
    """Mask to the support of ``Z``, retrain with the masks enforced, and
    return ``(masked_network, held_out_accuracy)``. Pruned filters keep a
    trainable bias unless ``config.drop_pruned_bias``."""
    config = config or ADMMConfig()
    net = apply_mask(network, MaskSet(dict(state.masks), drop_bias=config.drop_pruned_bias))
    if config.retrain_epochs:
        net, _ = train(
            net,
            dataset,
            config.retrain_epochs,
            lr=config.lr,
            batch=config.batch,
            seed=derive_seed(config.seed, "retrain"),
        )
    return net, evaluate_accuracy(net, test_set)
