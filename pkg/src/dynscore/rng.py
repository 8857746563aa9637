"""Named random streams derived from a single experiment seed."""

import zlib

import numpy as np

__all__ = ["stream", "item_stream"]


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, name):
    """Return a generator for the purpose ``name`` under ``seed``.

    Streams with different names are statistically independent, so drawing
    more from one (e.g. a larger batch) never shifts another.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name),))
    return np.random.Generator(np.random.PCG64(ss))


def item_stream(seed, name, index):
    """Per-item stream, used for batch items that need their own noise."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name), int(index)))
    return np.random.Generator(np.random.PCG64(ss))
