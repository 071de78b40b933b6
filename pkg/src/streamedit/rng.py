"""Counter-based randomness: every stream is a pure function of (seed, ids).

All subsystems draw from Philox generators keyed by the root seed and a
stream id, with the step index in the counter block. Re-running any step is
reproducible without serializing generator state, which is what makes
checkpoint resume bit-exact.
"""

from __future__ import annotations

import numpy as np

# stream ids, one per subsystem
DATA = 1
TRAIN_BASE = 2
TRAIN_MEMORY = 3
BENCH = 4
FUZZ = 5
INIT = 6


def philox(seed, stream, step=0):
    """Generator for (seed, stream, step); same triple, same draws."""
    bitgen = np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF,
                                            stream & 0xFFFFFFFFFFFFFFFF],
                                           dtype=np.uint64),
                              counter=np.array([step, 0, 0, 0], dtype=np.uint64))
    return np.random.Generator(bitgen)
