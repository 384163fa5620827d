"""Streaming frequency-domain adaptive filters with classical and learned multi-step optimizers."""

__version__ = "0.1.0"
