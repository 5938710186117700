"""Meta-learned modulated sinusoidal neural fields."""

__version__ = "0.1.0"

from .errors import ConfigError, DataFormatError, NumericalError, UsageError  # noqa: E402,F401
from .field_model import (  # noqa: E402,F401
    Latent, ModelConfig, SharedParams, build_omega_schedule, forward, init_shared,
)
from ._parallel import get_threads, set_threads  # noqa: E402,F401
