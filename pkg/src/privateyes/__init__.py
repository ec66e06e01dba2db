"""Desk-scale maliciously secure aggregation for federated gaze training,
with a leakage probe comparing it against single-server and datacentre
baselines."""

__version__ = "0.1.0"

from .field import FieldParams, FixedPointCodec
from .fedcore import ModelSpec, TrainConfig, gen_synthetic_population
from .protocol import run_secure_aggregation, run_training

__all__ = [
    "FieldParams",
    "FixedPointCodec",
    "ModelSpec",
    "TrainConfig",
    "gen_synthetic_population",
    "run_secure_aggregation",
    "run_training",
    "__version__",
]
