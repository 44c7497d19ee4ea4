"""Splittable, order-independent random number generation.

Every stochastic routine in the package derives its generator from a user
seed plus a tuple of context tags (estimator name, trial index, ...), so
results never depend on call order and trials can run concurrently.
"""

import zlib

import numpy as np


def _tag_word(tag) -> int:
    """Map a string or integer tag to a stable 32-bit word."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def child_rng(seed: int, *tags) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *tags).

    Uses Philox under a SeedSequence spawn key, so distinct tag tuples give
    statistically independent streams regardless of the order in which they
    are created.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag_word(t) for t in tags))
    return np.random.Generator(np.random.Philox(ss))
