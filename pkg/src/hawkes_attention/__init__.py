"""Hawkes Attention: per-type neural influence kernels inside masked self-attention
for marked temporal point processes."""

from .classical_hawkes import HawkesParams
from .data import EventDataset, EventSequence, load_dataset
from .errors import ConfigError, DataError, HawkesAttentionError, NumericalDivergence
from .model import HawkesAttention, ModelConfig

__all__ = [
    "ConfigError",
    "DataError",
    "EventDataset",
    "EventSequence",
    "HawkesAttention",
    "HawkesAttentionError",
    "HawkesParams",
    "ModelConfig",
    "NumericalDivergence",
    "load_dataset",
]
