"""Query-based scene-text spotter trained end to end on a small numpy autodiff kernel."""

from textspot.estimator import TextSpotter

__version__ = "0.1.0"

__all__ = ["TextSpotter", "__version__"]
