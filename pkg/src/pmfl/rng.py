"""Deterministic seed derivation for named RNG streams.

Every random decision in a run is drawn from its own generator, keyed by the
root seed plus a tuple of names (for example ``("train", node_id, round_idx)``).
Streams are hash-separated, so adding draws to one stream never shifts the
values produced by another, and results do not depend on scheduling order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, *keys) -> int:
    """Stable 128-bit seed for a named stream under ``root_seed``."""
    material = ":".join([str(int(root_seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(root_seed: int, *keys) -> np.random.Generator:
    """Independent generator for a named stream under ``root_seed``."""
    return np.random.default_rng(derive_seed(root_seed, *keys))
