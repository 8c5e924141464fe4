"""Counter-based random stream derivation.

Each stochastic component owns a substream addressed by an integer path
under a root seed, so draws never depend on evaluation order or on how
work is split across processes.
"""

import numpy as np


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return an independent Generator for the given path under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seeds(seed: int, *path: int, count: int = 1) -> list[int]:
    """Derive ``count`` independent 64-bit seeds at the given path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return [int(x) for x in ss.generate_state(count, dtype=np.uint64)]
