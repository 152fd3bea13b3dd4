"""Instructions-to-soft-prompt mutual mapping, desk scale."""

__version__ = "0.1.0"
