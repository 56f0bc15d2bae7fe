"""Utterance-pair coherence scoring and a longitudinal coherence marker for picture descriptions."""

__version__ = "0.1.0"
