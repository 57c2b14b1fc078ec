"""Named random substreams derived from one 64-bit seed.

Every consumer asks for its own stream by name, so adding a new consumer
never shifts the draws seen by an existing one.
"""
import zlib

import numpy as np


def substream(seed, name, *extra):
    """Return a ``numpy.random.Generator`` for ``(seed, name, *extra)``."""
    if isinstance(seed, np.random.Generator):
        return seed
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.default_rng(ss)


def as_generator(seed):
    """Accept an int seed or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
