"""Portable seedable random numbers for the lattice kernels.

The simulators use xoshiro256** (Blackman & Vigna, 2018) seeded through
splitmix64, so a given seed produces the same stream on every platform and
inside or outside numba-compiled code.  The generator state is a length-4
``uint64`` array that the kernels mutate in place.
"""

import numpy as np
from numba import njit

_MASK64 = (1 << 64) - 1


def splitmix64_sequence(seed, n):
    """Return ``n`` splitmix64 outputs for ``seed`` as Python ints."""
    x = int(seed) & _MASK64
    out = []
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


def make_state(seed):
    """Build a xoshiro256** state array from a 64-bit seed."""
    words = splitmix64_sequence(seed, 4)
    if not any(words):
        words[0] = 1
    return np.array(words, dtype=np.uint64)


@njit(cache=True, nogil=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True, nogil=True)
def next_u64(state):
    s0 = state[0]
    s1 = state[1]
    s2 = state[2]
    s3 = state[3]
    result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
    t = s1 << np.uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return result


@njit(cache=True, nogil=True)
def next_double(state):
    """Uniform double in [0, 1) with 53 random bits."""
    return float(next_u64(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, nogil=True)
def next_below(state, n):
    """Uniform integer in [0, n)."""
    k = int(next_double(state) * n)
    if k >= n:
        k = n - 1
    return k


class Xoshiro256:
    """Thin Python handle around a xoshiro256** state array."""

    def __init__(self, seed):
        self.seed = int(seed)
        self.state = make_state(seed)

    def random(self):
        return next_double(self.state)

    def integers(self, n):
        return next_below(self.state, n)

    def u64(self):
        return int(next_u64(self.state))
