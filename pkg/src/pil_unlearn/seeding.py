"""Named random streams derived from one global seed.

Each purpose (surrogate init, delta init, victim init, shuffles, ...) gets its
own ``SeedSequence`` child keyed by a stable hash of its name, so turning one
stage on or off never shifts the draws seen by another.
"""

import zlib

import numpy as np


def stream_seed(global_seed: int, name: str) -> int:
    """Deterministic 63-bit integer seed for the stream ``name``."""
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(int(global_seed), spawn_key=(key,))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def stream(global_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(global_seed, name))
