"""Structure-based scoring and ranking of single-point protein variants."""

__version__ = "0.1.0"
