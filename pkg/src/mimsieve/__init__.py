"""Masked-image-modeling pre-training with gradient-energy token selection.

Library layout:

* ``tensor``    -- minimal reverse-mode autodiff over dense numpy arrays
* ``imaging``   -- PNM/PNG decoding, patch grids, augmentation, perceptual hash
* ``hog``       -- per-patch oriented-gradient energy scores and top-k
* ``selection`` -- encode/reconstruction token planning with staged criteria
* ``model``     -- visible-token transformer encoder + cross-attention decoder
* ``trainer``   -- AdamW pre-training loop, schedules, throughput benchmark
* ``curation``  -- corpus slicing, perceptual-hash dedup, manifest building
* ``cli``       -- `mimsieve` command line (curate / pretrain / bench / inspect-selection)
"""

from .errors import (
    CapabilityError,
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    ParseError,
    StateError,
)
from .tensor import Tensor

__all__ = [
    "CapabilityError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "ParseError",
    "StateError",
    "Tensor",
]

__version__ = "0.1.0"
