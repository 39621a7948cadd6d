"""Graph-to-token instruction tuning with frozen causal language models."""

__version__ = "0.1.0"
