import os
import random

SEED_ENV = "PSIFEED_SEED"


def make_rng(seed: int | None = None) -> random.Random:
    """Seeded ``random.Random`` if a seed is given or set in PSIFEED_SEED, else OS entropy."""
    if seed is None:
        env = os.environ.get(SEED_ENV)
        if env not in (None, ""):
            seed = int(env)
    if seed is None:
        return random.SystemRandom()
    return random.Random(seed)


def child_rng(parent: random.Random) -> random.Random:
    # independent stream derived from parent; stays deterministic when parent is
    if isinstance(parent, random.SystemRandom):
        return random.SystemRandom()
    return random.Random(parent.getrandbits(128))
