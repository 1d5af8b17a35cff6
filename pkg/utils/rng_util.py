"""
Counter-based random streams.

Every draw in training and sampling comes from a Philox generator keyed by a
tuple of non-negative integers, so a stream depends only on its key and never
on how many other streams were consumed before it.
"""
import numpy as np

# stream tags
POISSON = 0
DP_NOISE = 1
DIFFUSION_NOISE = 2
SAMPLER = 3
METRICS = 4
DATA = 5
INIT = 6


def stream(seed, tag, *counters):
    """
    Return a numpy Generator backed by Philox, keyed by (seed, tag, *counters).
    Args:
        seed (int): Run seed.
        tag (int): One of the stream tags above.
        *counters (int): Step, element index, reseed index and so on.
    Returns:
        numpy.random.Generator
    """
    key = [int(seed), int(tag)] + [int(c) for c in counters]
    if any(k < 0 for k in key):
        raise ValueError(f"Stream keys must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def as_generator(rng):
    """Accept an int seed or a Generator and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(rng, SAMPLER)
