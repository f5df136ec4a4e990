"""Self-supervised score-based channel estimation for holographic MIMO arrays."""

__version__ = "0.1.0"
