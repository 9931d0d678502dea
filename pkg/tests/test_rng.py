import hashlib
import math
from collections import Counter

import numpy as np
import pytest

from vadprompt import rng


def test_philox_known_answer_vector():
    # Random123 reference: philox4x64-10, key 0, counter 0.
    # numpy bumps the counter before each block, so start one below zero.
    bg = np.random.Philox(key=0, counter=2**256 - 1)
    words = [int(bg.random_raw()) for _ in range(4)]
    assert words == [0x16554D9ECA36314C, 0xDB20FE9D672D0FDC, 0xD7E772CEE186176B, 0x7E68B68AEC7BA23B]


def test_stream_key_derivation():
    key = int.from_bytes(hashlib.sha256(b"7\x1fa\x1fb").digest()[:16], "little")
    expected = np.random.Philox(key=key)
    got = rng.stream(7, "a", "b")
    assert [rng.raw(got) for _ in range(5)] == [int(expected.random_raw()) for _ in range(5)]


def test_labels_separate_streams():
    assert rng.raw(rng.stream(0, "a")) != rng.raw(rng.stream(0, "b"))
    assert rng.raw(rng.stream(0, "a")) != rng.raw(rng.stream(1, "a"))


def test_sample_indices_pinned():
    # regression pin: changing it breaks reproducibility of stored random-subset runs
    assert rng.sample_indices(42, 6, 0, "random_subset") == [26, 12, 18, 11, 28, 15]


def test_sample_indices_distinct_and_complete():
    picks = rng.sample_indices(10, 10, 3)
    assert sorted(picks) == list(range(10))
    with pytest.raises(ValueError):
        rng.sample_indices(3, 4, 0)


def test_randbelow_roughly_uniform():
    bg = rng.stream(0, "uniformity")
    counts = Counter(rng.randbelow(bg, 6) for _ in range(12000))
    chi2 = sum((c - 2000) ** 2 / 2000 for c in counts.values())
    assert len(counts) == 6
    assert chi2 < 20.5  # 5 dof, p < 0.001


def test_uniform_range_and_normals_moments():
    bg = rng.stream(0, "moments")
    u = [rng.uniform(bg) for _ in range(5000)]
    assert 0.0 <= min(u) and max(u) < 1.0
    z = rng.normals(rng.stream(0, "normals"), 20001)
    assert z.shape == (20001,)
    assert abs(z.mean()) < 4 / math.sqrt(len(z))
    assert abs(z.var() - 1.0) < 0.05
