"""Propagation-graph fake news classification with continual learning."""

__version__ = "0.1.0"
