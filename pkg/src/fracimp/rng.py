"""Reproducible random streams keyed by (master seed, path of integers).

Every consumer asks for a stream by a key path such as
``(replicate, PURPOSE_IMPUTE, unit_id)``.  The stream is a fresh
``numpy.random.Generator`` seeded from a ``SeedSequence`` whose spawn key is
that path, so streams never overlap and never depend on call order.
"""

from __future__ import annotations

import numpy as np

# purpose tags used as the second element of key paths
PURPOSE_DATA = 0
PURPOSE_IMPUTE = 1
PURPOSE_BOOTSTRAP = 2
PURPOSE_JACKKNIFE = 3


def seed_sequence(master_seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the given key path."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *key)))


class StreamFactory:
    """Hands out keyed child streams below a fixed prefix.

    Parameters
    ----------
    master_seed : int
        Root entropy.
    prefix : tuple of int
        Key path shared by every stream this factory produces.
    """

    def __init__(self, master_seed: int, prefix: tuple[int, ...] = ()):
        self.master_seed = int(master_seed)
        self.prefix = tuple(int(k) for k in prefix)

    def child(self, *key: int) -> "StreamFactory":
        return StreamFactory(self.master_seed, self.prefix + tuple(int(k) for k in key))

    def generator(self, *key: int) -> np.random.Generator:
        return stream(self.master_seed, *self.prefix, *key)

    def __repr__(self) -> str:
        return f"StreamFactory(master_seed={self.master_seed}, prefix={self.prefix})"
