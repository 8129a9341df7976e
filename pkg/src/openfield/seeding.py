"""Deterministic per-module random stream derivation.

A single pipeline seed fans out into independent streams keyed by
(module name, index), so any stage can be rerun in isolation with
the exact randomness it saw inside the full pipeline.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, name: str, index: int = 0) -> int:
    """Stable 64-bit child seed for a named stream."""
    key = f"{seed}/{name}/{index}".encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name, index))
