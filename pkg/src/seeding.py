"""
Deterministic random stream derivation for SourceCV.

Every random draw in the package comes from a generator seeded by
derive_seed(master_seed, *keys), so results depend only on the master seed
and the keys, never on worker count or execution order.
"""

import hashlib

import numpy as np


def derive_seed(master_seed: int, *keys) -> int:
    """
    Derive a 64-bit child seed from a master seed and arbitrary keys.

    Args:
        master_seed: Experiment-level seed
        *keys: Identifiers of the stream (record id, source id, context id, ...)

    Returns:
        Non-negative integer below 2**64
    """
    material = "\x1f".join([str(int(master_seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master_seed: int, *keys) -> np.random.Generator:
    """Return a numpy Generator for the stream named by keys."""
    return np.random.default_rng(derive_seed(master_seed, *keys))
