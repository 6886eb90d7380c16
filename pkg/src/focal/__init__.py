"""Offline meta-reinforcement learning with a deterministic context encoder,
distance-metric task embeddings and a behavior-regularized actor-critic."""

__version__ = "0.1.0"
