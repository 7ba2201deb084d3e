"""Named random streams derived from one root seed."""
import zlib

import numpy as np


def rng_for(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for stage ``name``; stable across runs and platforms."""
    return np.random.default_rng([int(root_seed), zlib.crc32(name.encode("utf-8"))])
