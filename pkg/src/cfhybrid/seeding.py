"""Deterministic hierarchical RNG streams.

Every source of randomness in the package draws from a Generator obtained
here, keyed by a master seed plus a small integer path.  Streams with
different paths are statistically independent, and the derivation does not
depend on call order, so parallel or reordered execution reproduces the
same draws.
"""

import numpy as np


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, path)."""
    key = tuple(int(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def subseed(seed: int, *path: int) -> int:
    """Derived 64-bit seed for handing to an op that takes a seed argument."""
    key = tuple(int(p) for p in path)
    state = np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1, np.uint64)
    return int(state[0])
