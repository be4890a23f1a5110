"""Multi-task no-reference image quality assessment with high-frequency guidance."""

__version__ = "0.1.0"
