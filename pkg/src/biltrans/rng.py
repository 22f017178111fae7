"""Named deterministic random streams derived from one master seed."""

import hashlib

import numpy as np


def _digest_words(*names) -> list[int]:
    h = hashlib.blake2b("/".join(str(n) for n in names).encode(), digest_size=16)
    d = h.digest()
    return [int.from_bytes(d[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(master_seed: int, *names) -> np.random.Generator:
    """Independent generator for (master_seed, name path), stable across runs."""
    entropy = [int(master_seed) & 0xFFFFFFFF, (int(master_seed) >> 32) & 0xFFFFFFFF]
    entropy += _digest_words(*names)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_seed(master_seed: int, *names) -> int:
    """A derived 63-bit integer seed, for APIs that take a plain seed."""
    return int(stream(master_seed, *names).integers(0, 2**63 - 1))
