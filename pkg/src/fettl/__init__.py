"""Desk-scale simulator for federated template and task learning.

The package trains a whitening-coloring harmonizer across simulated
non-IID sites, then jointly optimizes a global style template and a
downstream task model, and compares the result against standard federated
baselines under a deterministic, auditable protocol.
"""

__version__ = "0.1.0"
