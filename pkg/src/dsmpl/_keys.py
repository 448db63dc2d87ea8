"""Counter-based sample keys.

Every random draw in a run is addressed by a tuple of integers (seed, agent,
iteration, replicate, ...). Hashing the tuple through ``SeedSequence`` gives a
64-bit key; oracles turn keys into generators. No stateful RNG is shared
between agents, so results do not depend on evaluation order.
"""

import numpy as np

MASK64 = (1 << 64) - 1


def derive_key(*parts: int) -> int:
    """Hash a tuple of non-negative integers into a 64-bit key."""
    entropy = [int(p) & MASK64 for p in parts]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32) | int(state[1])


def generator(*parts: int) -> np.random.Generator:
    """Return a fresh generator addressed by ``parts``."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))


def stream(key: int, index: int) -> np.random.Generator:
    """Generator for sub-stream ``index`` of a 64-bit key, without rehashing.

    The pair fills Philox's 128-bit key, so distinct ``(key, index)`` pairs
    give independent counter-based streams.
    """
    return np.random.Generator(np.random.Philox(key=(int(key) & MASK64) | ((int(index) & MASK64) << 64)))
