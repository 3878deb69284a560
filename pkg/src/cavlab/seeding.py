"""Derived seeds: every random stream is a pure function of a root seed and coordinates."""

import zlib

import numpy as np


def _as_int(part):
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def _entropy(parts):
    words = []
    for p in parts:
        v = _as_int(p)
        words.extend([v & 0xFFFFFFFF, v >> 32])
    return words


def derive_seed(*parts) -> int:
    """Map (root_seed, coord, coord, ...) to a 64-bit seed."""
    state = np.random.SeedSequence(_entropy(parts)).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def make_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(parts))))
