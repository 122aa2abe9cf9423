"""Disentangled representation learning for RF signals, built on a small numpy autodiff."""

__version__ = "0.1.0"
