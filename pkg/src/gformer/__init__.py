"""Composable generalized-transformer blocks with reference oracles, FLOP and
parameter accounting, multi-scale feature fusion, and a latency-scaling
benchmark harness."""

from .core import (
    Block,
    BlockParams,
    GFormerConfig,
    assemble,
    config_from_json,
    config_to_json,
    forward,
    preset,
)
from .tensor import Tensor, backward, record, tally_flops, vjp

__version__ = "0.1.0"

__all__ = [
    "Block",
    "BlockParams",
    "GFormerConfig",
    "Tensor",
    "assemble",
    "backward",
    "config_from_json",
    "config_to_json",
    "forward",
    "preset",
    "record",
    "tally_flops",
    "vjp",
    "__version__",
]
