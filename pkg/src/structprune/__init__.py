"""Structured pruning of small CNNs: ADMM regularization toward combined
filter/column structure, annealing search over per-layer rates, and
purification that physically shrinks the network."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, ContractError, FormatError, InfeasibleError, ShapeError, TrainingError
from .models import Network, build_network

__version__ = "0.1.0"
