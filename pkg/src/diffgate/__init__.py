"""Sparse additive diffs over a frozen encoder, gated by hard-concrete L0 gates."""
from .config import TrainPlan, config_hash, load_plan, model_hash
from .data import SynthSpec, generate
from .diffnet import DiffSubnetwork, magnitude_prune
from .encoder import EncoderConfig
from .errors import ConfigError, DiffgateError
from .pipeline import RunRecord, run_baseline, run_debias, run_diffpruning

__version__ = "0.1.0"
__all__ = [
    "TrainPlan", "config_hash", "load_plan", "model_hash", "SynthSpec", "generate", "DiffSubnetwork",
    "magnitude_prune", "EncoderConfig", "ConfigError", "DiffgateError", "RunRecord", "run_baseline",
    "run_debias", "run_diffpruning",
]
