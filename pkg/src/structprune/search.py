"""Simulated-annealing search over per-layer pruning actions.

An action assigns every conv layer a pruning rate (kept-before / kept-after)
and a split: the fraction of the layer's log-rate spent on filters, the rest
on columns. Actions obey two rules at all times:

* guided ordering: a layer with more remaining weights never gets a lower
  rate than a smaller layer;
* the realised overall reduction (params or FLOPs, from integer keep counts)
  stays within ``tolerance`` of the round target.

Rates are parameterised as ``exp(scale * shape)`` with a non-negative
``shape`` sorted along the layer-size order; ``scale`` is solved by bisection
so the overall reduction hits the target.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InfeasibleError
from .schemes import apply_mask, count_flops, count_params, layer_cost, layer_mask, magnitude_prune
from .training import evaluate_accuracy

log = logging.getLogger(__name__)

SPLITS = {"filter": 1.0, "column": 0.0}


@dataclass(frozen=True)
class Action:
    layers: tuple
    rates: tuple
    splits: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        object.__setattr__(self, "splits", tuple(float(s) for s in self.splits))
        if not len(self.layers) == len(self.rates) == len(self.splits):
            raise ContractError("action fields differ in length")
        if any(r < 1.0 for r in self.rates) or any(not 0.0 <= s <= 1.0 for s in self.splits):
            raise ContractError("rates must be >= 1 and splits in [0, 1]")

    def digest(self):
        text = ";".join(f"{i}:{r:.6f}:{s:.6f}" for i, r, s in zip(self.layers, self.rates, self.splits))
        return hashlib.sha1(text.encode()).hexdigest()[:10]

    @classmethod
    def uniform(cls, network, rate, split=0.5):
        idx = network.prunable_indices()
        return cls(idx, [rate] * len(idx), [split] * len(idx))


@dataclass
class SAConfig:
    t0: float | None = None  # None: calibrate from warm-up moves
    t_stop: float | None = None  # None: t0 * t_stop_ratio
    t_stop_ratio: float = 0.05
    eta: float = 0.7
    k: float = 1e-3
    iterations: int = 10
    seed: int = 0
    objective: str = "params"
    scheme: str = "combined"
    delta_max: float = 0.3
    warmup: int = 20
    initial_accept: float = 0.9
    tolerance: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ContractError("cooling factor must lie in (0, 1)")
        if self.t0 is not None and self.t_stop is not None and not self.t_stop < self.t0:
            raise ContractError("stop temperature must be below the initial temperature")
        if self.objective not in ("params", "flops"):
            raise ContractError(f"unknown objective {self.objective!r}")
        if self.scheme not in ("combined", "filter", "column"):
            raise ContractError(f"unknown scheme {self.scheme!r}")


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    params_rate: float
    flops_rate: float


@dataclass
class TraceEntry:
    step: int
    stage: str
    temperature: float
    action: object
    score: float
    accepted: bool
    current_score: float
    best_score: float

    def csv_row(self):
        digest = self.action.digest() if hasattr(self.action, "digest") else str(self.action)
        return (f"{self.step},{self.stage},{self.temperature:.6g},{self.score:.6f},{int(self.accepted)},"
                f"{self.current_score:.6f},{self.best_score:.6f},{digest}")


TRACE_HEADER = "step,stage,temperature,score,accepted,current_score,best_score,action_digest"


class ActionSpace:
    """Actions for one round on one network: sampling, perturbation, checks."""

    def __init__(self, network, target, objective="params", scheme="combined", delta_max=0.3, tolerance=0.1):
        if target <= 1.0:
            raise ContractError("round target must exceed 1")
        self.target = float(target)
        self.objective = objective
        self.scheme = scheme
        self.delta_max = delta_max
        self.tolerance = tolerance
        self.layers = tuple(network.prunable_indices())
        masks = [layer_mask(network, i) for i in self.layers]
        self.n_filters = np.array([int(m.filters.sum()) for m in masks], dtype=np.float64)
        self.n_columns = np.array([int(m.columns.sum()) for m in masks], dtype=np.float64)
        self.cost = np.array([layer_cost(network, i, objective) for i in self.layers], dtype=np.float64)
        self.sizes = self.n_filters * self.n_columns
        # layers in ascending size; ties keep index order
        self.order = np.argsort(self.sizes, kind="stable")
        self.before = float(np.sum(self.cost * self.sizes))
        self.ceiling = self.before / float(np.sum(self.cost))
        if self.ceiling < self.target * (1.0 - tolerance):
            raise InfeasibleError(f"target {target:g} exceeds the reachable reduction {self.ceiling:.3g}")

    # -- reductions ---------------------------------------------------------

    def _continuous(self, rates, splits):
        kf = np.maximum(self.n_filters / rates**splits, 1.0)
        kc = np.maximum(self.n_columns / rates ** (1.0 - splits), 1.0)
        return self.before / float(np.sum(self.cost * kf * kc))

    def keep(self, action):
        kf = np.floor(self.n_filters / np.power(action.rates, action.splits) + 0.5)
        kc = np.floor(self.n_columns / np.power(action.rates, 1.0 - np.asarray(action.splits)) + 0.5)
        return np.clip(kf, 1, self.n_filters), np.clip(kc, 1, self.n_columns)

    def realized(self, action):
        """Overall reduction the integer keep counts actually deliver."""
        kf, kc = self.keep(action)
        return self.before / float(np.sum(self.cost * kf * kc))

    def ordered(self, action):
        r = np.asarray(action.rates)[self.order]
        s = self.sizes[self.order]
        for a in range(len(r)):
            for b in range(a + 1, len(r)):
                if s[b] > s[a] and r[b] < r[a] * (1.0 - 1e-12):
                    return False
        return True

    def within_target(self, action):
        return abs(self.realized(action) / self.target - 1.0) <= self.tolerance + 1e-12

    def valid(self, action):
        return tuple(action.layers) == self.layers and self.ordered(action) and self.within_target(action)

    # -- construction -------------------------------------------------------

    def _splits(self, rng, n):
        if self.scheme in SPLITS:
            return np.full(n, SPLITS[self.scheme])
        return rng.uniform(0.0, 1.0, size=n)

    def _normalize(self, log_shape, splits):
        """Rates ``exp(s * log_shape)`` with ``s`` solved for the target."""
        log_shape = np.asarray(log_shape, dtype=np.float64)
        if np.all(log_shape <= 0):
            raise InfeasibleError("no layer has a positive rate share")

        def f(s):
            with np.errstate(over="ignore"):  # huge scales just mean "every layer at its floor"
                return self._continuous(np.exp(s * log_shape), splits)

        lo, hi = 0.0, 1.0
        while f(hi) < self.target:
            hi *= 2.0
            if hi > 1e6:
                raise InfeasibleError(f"target {self.target:g} unreachable with this rate profile")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(mid) < self.target:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * max(hi, 1.0):
                break
        return np.exp(hi * log_shape)

    def _assemble(self, log_rates, splits):
        log_rates = np.asarray(log_rates, dtype=np.float64)
        placed = np.empty_like(log_rates)
        placed[self.order] = np.sort(log_rates)
        rates = self._normalize(placed, splits)
        return Action(self.layers, rates, splits)

    def init_action(self, rng, attempts=50):
        n = len(self.layers)
        for _ in range(attempts):
            shape = rng.uniform(0.05, 1.0, size=n)
            action = self._assemble(shape, self._splits(rng, n))
            if self.within_target(action):
                return action
        raise InfeasibleError(f"no action within {self.tolerance:.0%} of target {self.target:g} after {attempts} draws")

    def jitter(self, action, delta, rng):
        """Perturbed ``(log_rates, splits)`` before reordering and renormalising."""
        n = len(self.layers)
        chosen = rng.choice(n, size=math.ceil(n / 3), replace=False)
        log_rates = np.log(np.asarray(action.rates))
        splits = np.array(action.splits)
        log_rates[chosen] *= rng.uniform(1.0 - delta, 1.0 + delta, size=len(chosen))
        if self.scheme == "combined":
            splits[chosen] = np.clip(splits[chosen] + rng.uniform(-delta, delta, size=len(chosen)), 0.0, 1.0)
        return log_rates, splits

    def perturb(self, action, temperature, t0, rng, attempts=20):
        """Random neighbour whose step size shrinks linearly with temperature."""
        delta = self.delta_max * min(temperature / t0, 1.0)
        for _ in range(attempts):
            log_rates, splits = self.jitter(action, delta, rng)
            cand = self._assemble(log_rates, splits)
            if self.within_target(cand):
                return cand
        return action


def init_action(network, target, objective, rng, scheme="combined"):
    return ActionSpace(network, target, objective, scheme).init_action(rng)


def perturb(action, temperature, t0, rng, space):
    return space.perturb(action, temperature, t0, rng)


def fast_evaluate(network, action, eval_subset):
    """Magnitude-prune a copy of ``network`` per ``action`` (no retraining) and
    score it. Rates are relative to ``network``'s current masks."""
    pruned = apply_mask(network, magnitude_prune(network, action))
    return EvalResult(
        evaluate_accuracy(pruned, eval_subset),
        count_params(network).conv / count_params(pruned).conv,
        count_flops(network).conv / count_flops(pruned).conv,
    )


def acceptance_probability(delta_e, temperature, k=1e-3):
    """Boltzmann acceptance of a move that worsens the score by ``delta_e``."""
    if delta_e <= 0:
        return 1.0
    return math.exp(-delta_e / (k * temperature))


def temperature_schedule(t0, eta, t_stop):
    """Temperatures ``t0 * eta**n`` visited while above ``t_stop``."""
    out, n = [], 0
    while (t := t0 * eta**n) > t_stop:
        out.append(t)
        n += 1
    return out


def calibrate_temperature(deltas, k, initial_accept):
    """Initial temperature at which the median uphill move is accepted with
    probability ``initial_accept``; 1.0 when no uphill move was seen."""
    ups = [d for d in deltas if d > 0]
    if not ups:
        return 1.0
    return float(np.median(ups)) / (k * math.log(1.0 / initial_accept))


@dataclass
class AnnealResult:
    best: object
    best_score: float
    trace: list = field(default_factory=list)
    t0: float = 1.0
    temperatures: list = field(default_factory=list)


def anneal(initial, score, neighbour, config, rng):
    """Maximise ``score`` from ``initial``.

    ``neighbour(state, T, T0, rng)`` proposes a move. Improvements are always
    accepted; a move that loses ``dE`` is accepted with probability
    ``exp(-dE / (k T))``. Temperature follows ``T0 * eta**n`` until it reaches
    the stop temperature. Returns the best state seen.
    """
    cur, cur_s = initial, score(initial)
    best, best_s = cur, cur_s
    trace = [TraceEntry(0, "init", float("nan"), cur, cur_s, True, cur_s, best_s)]
    t0 = config.t0
    if t0 is None:
        deltas = []
        for _ in range(config.warmup):
            probe = neighbour(cur, 1.0, 1.0, rng)
            s = score(probe)
            deltas.append(cur_s - s)
            if s > best_s:
                best, best_s = probe, s
            trace.append(TraceEntry(len(trace), "warmup", float("nan"), probe, s, False, cur_s, best_s))
        t0 = calibrate_temperature(deltas, config.k, config.initial_accept)
    t_stop = config.t_stop if config.t_stop is not None else t0 * config.t_stop_ratio
    temps = temperature_schedule(t0, config.eta, t_stop)
    for temp in temps:
        for _ in range(config.iterations):
            cand = neighbour(cur, temp, t0, rng)
            s = score(cand)
            d = cur_s - s
            accepted = d <= 0 or rng.random() < acceptance_probability(d, temp, config.k)
            if accepted:
                cur, cur_s = cand, s
            if s > best_s:
                best, best_s = cand, s
            trace.append(TraceEntry(len(trace), "anneal", temp, cand, s, accepted, cur_s, best_s))
        log.debug("T=%.4g current=%.4f best=%.4f", temp, cur_s, best_s)
    return AnnealResult(best, best_s, trace, t0, temps)


def sa_run(network, target, config, eval_subset):
    """Search one round's action. Returns ``(best_action, AnnealResult)``."""
    rng = np.random.default_rng(config.seed)
    space = ActionSpace(network, target, config.objective, config.scheme, config.delta_max, config.tolerance)
    cache = {}

    def score(action):
        key = action.digest()
        if key not in cache:
            cache[key] = fast_evaluate(network, action, eval_subset).accuracy
        return cache[key]

    result = anneal(space.init_action(rng), score, space.perturb, config, rng)
    result.space = space
    log.info("search: target %.3g best accuracy %.4f (realised %.3f)", target, result.best_score,
             space.realized(result.best))
    return result.best, result
