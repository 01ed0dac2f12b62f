"""Causal style removal for classifiers trained on text embeddings only:
style-mixed prompt training, a learned intervention network standing in for
the backdoor adjustment, and the matching diagnostics."""

__version__ = "0.1.0"
