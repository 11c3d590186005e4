"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored; every key must be a field of
:class:`RunConfig` and each key may appear once. Values are coerced to the
field's type. Lists are comma-separated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # data
    dataset: str = "digits"  # digits | synth | idx | cifar10
    data_path: str = ""
    labels_path: str = ""
    synth_n: int = 3000
    synth_classes: int = 4
    synth_size: int = 16
    test_fraction: float = 0.25
    val_fraction: float = 0.15
    # model and baseline training
    arch: str = "convnet-s"
    pretrained: str = ""
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    # rounds
    objective: str = "params"
    scheme: str = "combined"
    rounds: int = 8
    target: float = 2.0
    round_targets: list = field(default_factory=list)
    acc_floor: float = -1.0  # negative: baseline minus floor_margin
    floor_margin: float = 0.01
    budget_rate: float = 0.0  # > 0: cap on the final compact conv rate
    # search
    sa_iterations: int = 6
    sa_t_stop_ratio: float = 0.05
    sa_warmup: int = 20
    eval_size: int = 400
    # ADMM
    rho0: float = 1e-4
    admm_iterations: int = 9
    admm_epochs: int = 2
    retrain_epochs: int = 6
    drop_pruned_bias: bool = False
    # purification
    purify: bool = True
    purify_per_round: bool = False
    epsilon: float = 0.002
    purify_iterations: int = 4
    # output
    output_dir: str = "run"

    def __post_init__(self):
        if self.objective not in ("params", "flops"):
            raise ConfigError(f"objective must be params or flops, not {self.objective!r}")
        if self.scheme not in ("combined", "filter", "column"):
            raise ConfigError(f"scheme must be combined, filter or column, not {self.scheme!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.target <= 1 or any(t <= 1 for t in self.round_targets):
            raise ConfigError("round targets must exceed 1")
        if not 0 < self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("split fractions must lie in (0, 1)")

    def round_target(self, t):
        """Target for 1-based round ``t``."""
        return self.round_targets[t - 1] if t <= len(self.round_targets) else self.target

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name, kind, raw, line_no):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "list":
            return [float(x) for x in raw.split(",") if x.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"line {line_no}: {name} expects {kind}, got {raw!r}") from None


def _kinds():
    return {f.name: f.type for f in dataclasses.fields(RunConfig)}


def parse_config(text, base=None):
    """Parse config ``text`` into a :class:`RunConfig` (overriding ``base``)."""
    kinds = _kinds()
    seen = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        if key not in kinds:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {line_no}: {key!r} already set")
        seen[key] = _coerce(key, kinds[key], value, line_no)
    base = base or RunConfig()
    return base.replace(**seen)


def load_config(path, base=None):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc.reason})") from None
    return parse_config(text, base)


def dump_config(config):
    out = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, list):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
