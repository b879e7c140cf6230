"""Learning to self-train: semi-supervised few-shot meta-learning at desk scale."""

__version__ = "0.1.0"
