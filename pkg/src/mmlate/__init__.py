"""Multimodal late-interaction retrieval: scoring kernels, a token index,
fusion baselines, a small contrastive trainer, evaluation and a synthetic
benchmark generator."""

__version__ = "0.1.0"
