"""Reproducible random streams.

Every draw is addressed by ``(seed, step)``; inside a step the position of a
normal in the returned ``(channels, n)`` block identifies the particle and the
channel. Draws therefore never depend on evaluation order or thread count.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed, label):
    """Derive a 64-bit subsystem seed from a master seed and a text label."""
    digest = hashlib.blake2b(f"{int(seed) & _MASK64}:{label}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def step_generator(seed, step):
    """Counter-based generator keyed by ``(seed, step)``."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & _MASK64, int(step) & _MASK64]))


def step_normals(seed, step, channels, n, antithetic=False):
    """Standard normals of shape ``(channels, n)`` for one time step.

    With ``antithetic`` the second half of the particles receives the
    negated draws of the first half (``n`` must then be even).
    """
    gen = step_generator(seed, step)
    if not antithetic:
        return gen.standard_normal((channels, n))
    if n % 2:
        raise ValueError("antithetic sampling needs an even particle count")
    half = gen.standard_normal((channels, n // 2))
    return np.concatenate([half, -half], axis=1)
