"""Double-sided remove-and-reconstruct feature attribution."""

__version__ = "0.1.0"
