"""
Named random sub-streams derived from one global seed
A stream is identified by (seed, module, purpose, indices...), so adding a new
consumer never shifts the draws of an existing one
"""
import hashlib

import numpy as np


def stream_key(*names):
    """Stable 32-bit words for a sequence of names or integers"""
    words = []
    for name in names:
        if isinstance(name, (int, np.integer)) and not isinstance(name, bool):
            words.append(int(name) & 0xFFFFFFFF)
            continue
        digest = hashlib.blake2b(str(name).encode('utf-8'), digest_size=4).digest()
        words.append(int.from_bytes(digest, 'little'))
    return words


def derive_rng(seed, *names):
    """numpy Generator for the named sub-stream of seed"""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + stream_key(*names)))


def derive_seed(seed, *names):
    """Integer seed for the named sub-stream (for APIs that want an int)"""
    return int(derive_rng(seed, *names).integers(0, 2**31 - 1))
