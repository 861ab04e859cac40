"""Two-stage few-shot named entity recognition on a small autoregressive backbone."""
from .errors import FsnerError, NumericAbort, ValidationError

__version__ = "0.1.0"
__all__ = ["FsnerError", "NumericAbort", "ValidationError", "__version__"]
