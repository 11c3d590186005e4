"""Mini-batch Adam training and accuracy evaluation."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import TrainingError
from .optim import AdamState, adam_step
from .schemes import zero_masked


def train(network, dataset, epochs, lr=1e-3, batch=64, seed=0, regularizer=None, iteration=None):
    """Train a copy of ``network``; returns ``(trained, loss_history)``.

    ``loss_history`` holds the mean training loss of each epoch (data loss
    only, without the regularizer). ``regularizer(weights)`` may add a penalty,
    where ``weights`` maps weighted-layer index to its tracked weight tensor.
    The network's masks are re-applied after every optimizer step.
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    net = network.clone()
    zero_masked(net)
    params = net.parameters()
    state = AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    index = net.weighted_indices()
    history = []
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            tape = T.Tape()
            leaves = [tape.watch(p) for p in params]
            logits = net.forward(dataset.images[idx], leaves)
            loss = T.softmax_cross_entropy(logits, dataset.labels[idx])
            data_loss = float(loss.data)
            if regularizer is not None:
                loss = loss + regularizer({i: leaves[2 * k] for k, i in enumerate(index)})
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", iteration=iteration)
            grads = tape.backward(loss)
            tape.clear()
            params, state = adam_step(params, [grads[l] for l in leaves], state)
            _install(net, params)
            zero_masked(net)
            params = net.parameters()
            total += data_loss * len(idx)
        history.append(total / n)
    return net, history


def _install(net, params):
    it = iter(params)
    for i in net.weighted_indices():
        net.layers[i].weight = next(it)
        net.layers[i].bias = next(it)


def predict(network, images, batch=500):
    return np.argmax(network.predict_logits(images, batch), axis=1)


def evaluate_accuracy(network, dataset, batch=500):
    """Fraction of records whose argmax logit (lowest index on ties) equals the label."""
    return float(np.mean(predict(network, dataset.images, batch) == dataset.labels))


def mean_loss(network, dataset, batch=500):
    logits = network.predict_logits(dataset.images, batch)
    return float(T.softmax_cross_entropy(logits, dataset.labels).data)
