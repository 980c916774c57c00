"""Energy-based re-ranking of n-best translation candidates."""

__version__ = "0.1.0"
