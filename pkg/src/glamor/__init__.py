"""Two-branch face and context emotion recognition with global-local attention."""

__version__ = "0.1.0"
