"""Seeded random streams.

Every random draw in the package comes from numpy's PCG64 bit generator.
A stream is keyed by ``(seed, component name)``: the name is hashed with
SHA-256 and fed to ``SeedSequence`` together with the seed, so adding a new
component never shifts the draws of an existing one.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for component ``name`` under ``seed``.

    ``extra`` integers (e.g. a round index) further split the stream.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed), _name_key(name), *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
