import hashlib
import math
import struct
import subprocess
import sys
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keylock.keycore import (EntropyError, Permutation, SecretKey, compose, derive_permutation,
                             effective_key_bits, generate_key, invert, key_space_bits,
                             key_space_size, load_key, save_key)

keys = st.binary(min_size=32, max_size=32).map(SecretKey)


def reference_permutation(key: bytes, n: int) -> list:
    """Straight transcription of the documented construction."""
    seed = hashlib.sha256(key + n.to_bytes(8, "big") + b"keylock/perm/v1").digest()
    words = []

    def word():
        if not words:
            block = hashlib.sha256(seed + reference_permutation.counter.to_bytes(8, "big")).digest()
            reference_permutation.counter += 1
            words.extend(reversed(struct.unpack(">4Q", block)))
        return words.pop()

    reference_permutation.counter = 0
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        bound = i + 1
        limit = 2**64 - (2**64 % bound)
        while True:
            w = word()
            if w < limit:
                break
        j = w % bound
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def test_generate_key_is_deterministic_under_seed():
    assert generate_key(0) == generate_key(0)
    assert generate_key(0) != generate_key(1)


def test_generate_key_without_seed_is_fresh():
    drawn = {generate_key().data for _ in range(1000)}
    assert len(drawn) == 1000


def test_generate_key_reports_entropy_failure():
    def broken(n):
        raise OSError("no randomness")

    with pytest.raises(EntropyError, match="entropy unavailable"):
        generate_key(entropy=broken)


def test_secret_key_validation_and_hex():
    with pytest.raises(ValueError):
        SecretKey(b"short")
    k = generate_key(5)
    assert SecretKey.from_hex(k.hex()) == k
    with pytest.raises(ValueError):
        SecretKey.from_hex(k.hex().upper())
    assert k.hex() not in repr(k)


def test_key_file_format(tmp_path):
    k = generate_key(11)
    path = tmp_path / "k.key"
    save_key(k, path)
    text = path.read_text()
    assert text == k.hex() + "\n"
    assert len(text.strip()) == 64 and text.strip() == text.strip().lower()
    assert load_key(path) == k


def test_derive_permutation_trivial_cases():
    assert derive_permutation(generate_key(3), 1).map.tolist() == [0]
    with pytest.raises(ValueError, match="empty permutation"):
        derive_permutation(generate_key(3), 0)


def test_derive_permutation_repeatable():
    k0 = generate_key(0)
    a = derive_permutation(k0, 12)
    b = derive_permutation(k0, 12)
    assert a.map.tobytes() == b.map.tobytes()


@pytest.mark.parametrize("n", [1, 2, 12, 48, 192, 1000])
def test_derive_permutation_matches_reference_construction(n):
    key = generate_key(n)
    assert derive_permutation(key, n).map.tolist() == reference_permutation(key.data, n)


def test_derive_permutation_same_in_fresh_process():
    code = ("from keylock.keycore import generate_key, derive_permutation;"
            "print(derive_permutation(generate_key(42), 48).to_text())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == derive_permutation(generate_key(42), 48).to_text()


def test_one_bit_key_change_changes_permutation():
    rng = np.random.default_rng(0)
    differ = 0
    for _ in range(1000):
        k = SecretKey(rng.bytes(32))
        k2 = k.flip_bit(int(rng.integers(256)))
        differ += derive_permutation(k, 12) != derive_permutation(k2, 12)
    assert differ >= 990


@settings(max_examples=60, deadline=None)
@given(keys, st.integers(min_value=1, max_value=10_000))
def test_bijective(key, n):
    p = derive_permutation(key, n)
    assert np.array_equal(np.sort(p.map), np.arange(n))


def test_uniformity_smoke():
    rng = np.random.default_rng(99)
    counts = Counter(tuple(derive_permutation(SecretKey(rng.bytes(32)), 4).map.tolist())
                     for _ in range(24000))
    assert len(counts) == 24
    for c in counts.values():
        assert abs(c / 24000 - 1 / 24) <= 0.25 / 24


def test_invert_examples():
    assert invert(Permutation.identity(5)) == Permutation.identity(5)
    assert invert(Permutation([2, 0, 1])).map.tolist() == [1, 2, 0]
    p = derive_permutation(generate_key(8), 48)
    assert invert(invert(p)) == p


@settings(max_examples=50, deadline=None)
@given(keys, st.integers(min_value=1, max_value=500))
def test_invert_composes_to_identity(key, n):
    p = derive_permutation(key, n)
    q = invert(p)
    assert all(q.map[p.map[k]] == k for k in range(n))
    assert compose(p, q) == Permutation.identity(n)


def test_permutation_is_immutable_and_validated():
    p = Permutation([1, 0, 2])
    with pytest.raises(ValueError):
        p.map[0] = 2
    with pytest.raises(ValueError):
        Permutation([0, 0, 1])
    with pytest.raises(ValueError):
        Permutation([])


def test_permutation_text_round_trip():
    p = derive_permutation(generate_key(2), 12)
    text = p.to_text()
    assert "\n" not in text and text.count(",") == 11
    assert Permutation.from_text(text) == p


def _factorial_loop(n):
    out = 1
    for i in range(2, n + 1):
        out *= i
    return out


def test_key_space_examples():
    assert key_space_size(1, 1) == 1
    assert key_space_size(3, 2) == 479001600
    assert key_space_size(3, 4) == _factorial_loop(48)
    assert key_space_size(3, 8) == _factorial_loop(192)


def test_key_space_rejects_bad_input():
    with pytest.raises(ValueError):
        key_space_size(0, 2)
    with pytest.raises(OverflowError):
        key_space_size(2**40, 2**20)


@pytest.mark.parametrize("c,m", [(1, 2), (3, 2), (3, 4), (2, 3)])
def test_key_space_channel_consistency(c, m):
    tail = 1
    for i in range(m * m + 1, c * m * m + 1):
        tail *= i
    assert key_space_size(c, m) == key_space_size(1, m) * tail


def test_key_space_bits():
    assert key_space_bits(3, 2) == pytest.approx(math.log2(479001600))
    assert effective_key_bits(3, 2) == pytest.approx(28.84, abs=0.01)
    assert effective_key_bits(3, 8) == 256.0
