"""Seed derivation.

Every random draw in the package comes from numpy's PCG64 bit generator. A
global integer seed is expanded into independent per-purpose streams by mixing
the first 8 bytes of ``sha256(name)`` into a ``SeedSequence``, so adding a new
consumer never shifts the numbers another consumer sees.
"""
from __future__ import annotations

import hashlib

import numpy as np


def name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, *names: str | int) -> np.random.Generator:
    entropy = [int(seed)] + [n if isinstance(n, int) else name_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
