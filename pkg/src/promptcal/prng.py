"""Counter-based splitmix64 random streams.

Every draw is a pure function of ``(seed, tag, index)`` so that adding new
draws to one stream never shifts the values of another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 output for the 64-bit state ``x``."""
    z = (x + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def tag_key(tag: str) -> int:
    """Stable 64-bit key for a purpose tag (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(seed: int, *parts: int | str) -> int:
    """Derive a sub-seed from ``seed`` and a path of tags / integers."""
    state = splitmix64(seed & _MASK)
    for part in parts:
        key = tag_key(part) if isinstance(part, str) else (part & _MASK)
        state = splitmix64(state ^ key)
    return state


def _mix_array(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class Stream:
    """A keyed counter stream: ``stream.uint64(n, start)`` is stateless.

    Parameters
    ----------
    seed : int
        Root seed.
    *tags : str or int
        Purpose path, e.g. ``("images", class_id)``.
    """

    def __init__(self, seed: int, *tags: int | str):
        self.key = derive_seed(seed, *tags)

    def uint64(self, n: int, start: int = 0) -> np.ndarray:
        counters = np.arange(start, start + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = counters * np.uint64(_GOLDEN) + np.uint64(self.key)
        return _mix_array(states)

    def uniform(self, n: int, start: int = 0) -> np.ndarray:
        """Uniform draws in the open interval (0, 1) with 53-bit resolution."""
        bits = self.uint64(n, start) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)

    def normal(self, shape, start: int = 0) -> np.ndarray:
        """Standard normal draws via Box-Muller over consecutive counter pairs."""
        size = int(np.prod(shape))
        u = self.uniform(2 * size, 2 * start)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def permutation(self, n: int, start: int = 0) -> np.ndarray:
        """Permutation of ``range(n)`` by sorting uniform keys (stable)."""
        return np.argsort(self.uniform(n, start), kind="stable")
