"""Counter-based seed splitting.

Every random stream is addressed by a tuple of non-negative integers
(root seed, then e.g. model / image / iteration / sample), so results do
not depend on evaluation order or on how work is split across threads.
"""

import numpy as np


def derive(seed, *keys):
    """Collapse ``(seed, *keys)`` into a single 63-bit integer seed."""
    state = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def generator(seed, *keys):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])))
