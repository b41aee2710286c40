"""Deterministic RNG derivation from integer key tuples.

Every stochastic draw in the package gets its generator from `rng_from`,
keyed on (master_seed, purpose tag, indices...).  Results are therefore
independent of worker count, chunking, and evaluation order.
"""

import numpy as np

# purpose tags; must stay stable across versions or seeds change meaning
TAG_TRAIN_SAMPLE = 1
TAG_VAE_INIT = 2
TAG_VAE_EPOCH = 3
TAG_VAL_STATE = 4
TAG_OBS_NOISE = 5


def rng_from(*keys: int) -> np.random.Generator:
    """Build a generator from a tuple of non-negative integer keys."""
    ks = [int(k) for k in keys]
    if any(k < 0 for k in ks):
        raise ValueError(f"seed keys must be non-negative, got {ks}")
    return np.random.default_rng(np.random.SeedSequence(ks))
