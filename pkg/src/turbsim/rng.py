"""Counter-based named random streams.

Every stream is keyed by ``(master_seed, purpose, *counters)``, so draws never
depend on the order in which frames, sequences or workers are processed.
"""

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    FIELD = 1
    NOISE = 2
    BASIS = 3
    PROFILE = 4
    SEQUENCE = 5


def stream(master_seed: int, purpose: int, *counters: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(purpose), *map(int, counters)))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(master_seed: int, purpose: int, *counters: int) -> int:
    """A 64-bit child seed, e.g. the master seed of one sequence in a dataset."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(purpose), *map(int, counters)))
    lo, hi = ss.generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)
