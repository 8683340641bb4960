from hashlib import md5

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(value: int) -> int:
    """
    SplitMix64 finalizer: a bijective avalanche mix of a 64-bit integer.
    """
    z = (value + _GOLDEN_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def label_digest(label: str) -> int:
    """First 8 bytes of the md5 digest of the label, as a big-endian integer."""
    return int.from_bytes(md5(label.encode("utf-8")).digest()[:8], "big")


def derive_seed(base_seed: int, replication: int, label: str) -> int:
    """
    Derive the 64-bit seed of one work item.

    seed = mix64(mix64(base_seed) ^ mix64(replication) ^ label_digest(label)), so the seed of
    a replication depends on its index and label only, never on the execution schedule.

    Args:
        base_seed: The experiment base seed, reduced modulo 2**64.
        replication: The replication index.
        label: The policy label, or a reserved stream name such as "model-pool".

    Returns:
        int: A seed in [0, 2**64).
    """
    state = mix64(base_seed & _MASK64) ^ mix64(replication & _MASK64) ^ label_digest(label)
    return mix64(state)


def make_rng(base_seed: int, replication: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, replication, label))
