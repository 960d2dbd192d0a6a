"""Context-aware prosody prediction with a conditional diffusion model.

Includes a synthetic conversation corpus whose true prosody distribution
is known, so sample diversity can be scored against an exact reference.
"""

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DivergenceError

__all__ = ["RunConfig", "load_config", "ConfigError", "DataError", "DivergenceError"]
__version__ = "0.1.0"
