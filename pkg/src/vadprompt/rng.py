"""Portable seeded randomness.

Only raw 64-bit words from the Philox4x64-10 counter-based generator are used;
every conversion (uniform floats, bounded integers, normals) is done here so
results do not depend on numpy's distribution algorithms, which may change
between releases.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

ALGORITHM = "philox4x64-10"


def stream(seed: int, *labels: str) -> np.random.Philox:
    """Independent generator keyed by ``seed`` and optional string labels."""
    material = "\x1f".join([str(int(seed)), *labels]).encode("utf-8")
    key = int.from_bytes(hashlib.sha256(material).digest()[:16], "little")
    return np.random.Philox(key=key)


def raw(bg: np.random.Philox) -> int:
    return int(bg.random_raw())


def uniform(bg: np.random.Philox) -> float:
    """Float in [0, 1) with 53 random bits."""
    return (raw(bg) >> 11) * 2.0**-53


def randbelow(bg: np.random.Philox, n: int) -> int:
    """Unbiased integer in [0, n) by rejection."""
    if n <= 0:
        raise ValueError("n must be positive")
    limit = (1 << 64) - ((1 << 64) % n)
    while True:
        r = raw(bg)
        if r < limit:
            return r % n


def sample_indices(n: int, k: int, seed: int, *labels: str) -> list[int]:
    """``k`` distinct indices from ``range(n)`` via a partial Fisher-Yates shuffle."""
    if not 0 <= k <= n:
        raise ValueError(f"cannot draw {k} of {n}")
    bg = stream(seed, *labels)
    pool = list(range(n))
    for i in range(k):
        j = i + randbelow(bg, n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]


def normals(bg: np.random.Philox, size: int) -> np.ndarray:
    """Box-Muller standard normals."""
    out = np.empty(size)
    i = 0
    while i < size:
        u1 = 1.0 - uniform(bg)  # (0, 1]
        u2 = uniform(bg)
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < size:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2
    return out
