"""CSI-aware masked-attention semantic image transmission over MIMO fading channels."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, parse_config_text  # noqa: E402,F401
from .system import LinkModel  # noqa: E402,F401
