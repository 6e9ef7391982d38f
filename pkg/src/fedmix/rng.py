"""Named, keyed random streams derived from one experiment seed."""
import zlib

import numpy as np

STREAMS = ("init", "partition", "sampling", "batching", "data", "eval")


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``; stable across runs and processes."""
    tag = zlib.crc32(name.encode("ascii"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *(int(k) for k in keys)]))
