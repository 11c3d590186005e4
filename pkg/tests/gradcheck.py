"""Central finite-difference gradient checks for tape-recorded functions."""

import numpy as np

from structprune import tensor as T

H = 1e-6


def analytic(fn, arrays):
    tape = T.Tape()
    leaves = [tape.watch(a) for a in arrays]
    loss = fn(*leaves)
    grads = tape.backward(loss)
    return [grads[l] for l in leaves]


def numeric(fn, arrays, h=H):
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (float(fn(*plus).data) - float(fn(*minus).data)) / (2 * h)
        out.append(g)
    return out


def max_relative_error(fn, arrays):
    """max |analytic - numeric| relative to the gradient's own scale, over all inputs."""
    worst = 0.0
    for a, n in zip(analytic(fn, arrays), numeric(fn, arrays)):
        scale = max(np.abs(n).max(), np.abs(a).max(), 1e-12)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst
