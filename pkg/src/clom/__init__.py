"""Margin-based few-shot class-incremental learning on a small numpy autodiff core."""

from .errors import ClomError

__version__ = "0.1.0"

__all__ = ["ClomError", "__version__"]
