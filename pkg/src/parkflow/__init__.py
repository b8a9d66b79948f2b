"""Price-aware occupancy forecasting with invertible NODE stacks, and one-shot price optimization."""

__version__ = "0.1.0"
