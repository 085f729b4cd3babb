"""Few-shot biometric recognition with prototype-node class graphs."""

__version__ = "0.1.0"
