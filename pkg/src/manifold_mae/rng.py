"""Deterministic random streams derived from (seed, purpose, counters).

Every consumer of randomness gets its own tagged stream so results never
depend on evaluation order, thread count, or which other features ran.
"""

import numpy as np

# purpose tags; never reuse a tag for a second consumer
INIT = 0
MASK = 1
AUGMENT = 2
SHUFFLE = 3
SPLIT = 4
SYNTH = 5
PROBE = 6


def stream(seed: int, tag: int, *key: int) -> np.random.Generator:
    entropy = (int(seed), int(tag)) + tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy))
