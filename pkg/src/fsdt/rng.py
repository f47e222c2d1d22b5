"""Deterministic random-stream derivation.

Every random draw in the package comes from a Generator built by
``substream``, so a single root seed plus a key path (round number,
client id, episode index, parameter name, ...) pins the entire run.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("substream keys must be non-negative integers")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"unsupported substream key type: {type(key)!r}")


def substream(*keys) -> np.random.Generator:
    """Return an independent PCG64 generator for the given key path."""
    if not keys:
        raise ValueError("substream needs at least one key")
    entropy = [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
