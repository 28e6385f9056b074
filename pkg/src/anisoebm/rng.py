"""Seed-derivation helpers.

All randomness in a run flows from one root seed. Named substreams are
derived by hashing the stream name into extra entropy words, so adding a
stream never perturbs the others and two variants can share exactly the
streams they are meant to share (e.g. minibatch draws) while keeping
private ones (chain noise).
"""
import hashlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.SeedSequence:
    """Derive a named SeedSequence from the root seed."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence(entropy=[int(root_seed) & 0xFFFFFFFFFFFFFFFF, *words])


def generator(root_seed: int, name: str) -> np.random.Generator:
    """PCG64 generator on a named substream."""
    return np.random.Generator(np.random.PCG64(substream(root_seed, name)))
