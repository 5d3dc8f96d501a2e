"""Two-stage click-based interactive segmentation refinement toolkit."""

__version__ = "0.1.0"
