"""Counter-based random streams addressed by (seed, stream, point index).

Every point owns one Philox counter block of four doubles, so a shard
``[start, stop)`` generated on its own is bit-identical to the same rows of a
serial draw over the whole range.
"""

import numpy as np

WIDTH = 4

# stream ids, one per consumer, so changing one never shifts another
CIRCLES = 1
CORRUPT = 2
SHUFFLE = 3
INIT = 4
PERTURB = 5
SPLIT = 6


def point_uniforms(seed, stream, start, stop):
    """Uniform [0, 1) draws of shape ``(stop - start, 4)``."""
    if stop < start:
        raise ValueError("stop < start")
    bg = np.random.Philox(key=np.array([int(seed), int(stream)], dtype=np.uint64))
    bg.advance(int(start))
    return np.random.Generator(bg).random((stop - start) * WIDTH).reshape(-1, WIDTH)


def generator(seed, stream, *extra):
    """A plain sequential Generator for bulk draws (init, shuffles)."""
    ss = np.random.SeedSequence([int(seed), int(stream), *(int(e) for e in extra)])
    return np.random.Generator(np.random.PCG64(ss))
