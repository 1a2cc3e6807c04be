"""Attribute-disentangled multi-label learning at desk scale."""

from .config import RunConfig, load_config, parse_config
from .harness import ablate_ndsi, compare_modes, train_run

__all__ = ["RunConfig", "load_config", "parse_config", "train_run", "compare_modes", "ablate_ndsi"]
__version__ = "0.1.0"
