"""Power side-channel lab for shuffled fixed-point neural-network inference."""

__version__ = "0.1.0"
