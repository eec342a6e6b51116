"""Weakly-supervised video anomaly detection on precomputed clip features.

Subpackages cover the full pipeline: a clip-level anomaly scorer trained with
a max-selection ranking objective, an online context memory with attention
retrieval and gated fusion, pseudo-instruction dataset generation with a small
reference decoder, frame-level AUC evaluation, a synthetic dataset generator,
and a command line front end.
"""

__version__ = "0.1.0"
