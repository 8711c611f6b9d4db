"""Deterministic seed derivation: every random stream in a run is keyed by
the master seed plus a path of string labels, hashed with SHA-256. Streams
are therefore independent of execution order and safe to draw concurrently.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
