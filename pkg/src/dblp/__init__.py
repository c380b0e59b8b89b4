"""Phase-aware bounded-loss gradient transport."""

__version__ = "0.1.0"
