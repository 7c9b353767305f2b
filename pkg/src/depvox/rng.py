"""Named random streams derived from one root seed."""

import zlib

import numpy as np


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "init", "dropout", "shuffle", "crop")."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(ss)
