"""Secret keys, keyed permutations and key-space arithmetic.

Permutations are generated by a Fisher-Yates shuffle driven by a small,
fixed deterministic random-bit generator, so a given ``(key, n)`` pair maps
to the same permutation on every platform, forever:

    seed    = SHA-256(key bytes || n as 8-byte big-endian || b"keylock/perm/v1")
    block_i = SHA-256(seed || i as 8-byte big-endian),   i = 0, 1, 2, ...

The concatenated blocks are consumed as big-endian 64-bit words. Each index
draw in ``[0, bound)`` uses rejection sampling, so there is no modulo bias.
Indices are 0-based.

The key is always 256 bits. The number of distinct permutations for a block
vector of length ``n`` is ``n!``, so the effective key space of a
configuration is ``min(2**256, n!)``: ``12!`` (about ``2**28.8``) for RGB with
2x2 blocks, far more than ``2**256`` for 8x8 blocks.
"""
from __future__ import annotations

import hashlib
import math
import os
import secrets
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

KEY_BYTES = 32
PERM_TAG = b"keylock/perm/v1"
KEYGEN_TAG = b"keylock/keygen/v1"
_U64 = 1 << 64
_MAX_COUNT = (1 << 63) - 1


class EntropyError(RuntimeError):
    """The operating system could not supply random bytes."""


@dataclass(frozen=True)
class SecretKey:
    """A 256-bit secret. Any 32-byte value is a valid key."""

    data: bytes

    def __post_init__(self):
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) != KEY_BYTES:
            raise ValueError(f"secret key must be {KEY_BYTES} bytes, got {len(self.data)}")

    def __repr__(self) -> str:
        # never leak key material into logs or tracebacks
        return f"SecretKey(fingerprint={self.fingerprint()!r})"

    def hex(self) -> str:
        return self.data.hex()

    @classmethod
    def from_hex(cls, text: str) -> "SecretKey":
        text = text.strip()
        if len(text) != 2 * KEY_BYTES or text != text.lower():
            raise ValueError("key must be 64 lowercase hex characters")
        try:
            return cls(bytes.fromhex(text))
        except ValueError as exc:
            raise ValueError("key must be 64 lowercase hex characters") from exc

    def fingerprint(self) -> str:
        """First 8 hex characters of SHA-256 of the key; safe to publish."""
        return hashlib.sha256(self.data).hexdigest()[:8]

    def flip_bit(self, bit: int) -> "SecretKey":
        buf = bytearray(self.data)
        buf[bit // 8] ^= 1 << (bit % 8)
        return SecretKey(bytes(buf))


def save_key(key: SecretKey, path: str | os.PathLike) -> None:
    """Write ``key`` as a single line of 64 lowercase hex characters."""
    Path(path).write_text(key.hex() + "\n", encoding="ascii")


def load_key(path: str | os.PathLike) -> SecretKey:
    return SecretKey.from_hex(Path(path).read_text(encoding="ascii"))


def generate_key(seed: int | None = None,
                 entropy: Callable[[int], bytes] | None = None) -> SecretKey:
    """Create a new secret key.

    Args:
        seed: if given, the key is a deterministic function of this
            non-negative integer (for reproducible experiments). Otherwise
            the key is drawn from ``entropy``.
        entropy: byte source used when ``seed`` is None; defaults to
            :func:`secrets.token_bytes`.

    Raises:
        EntropyError: the entropy source failed.
    """
    if seed is not None:
        if seed < 0 or seed >= _U64:
            raise ValueError("seed must be in [0, 2**64)")
        return SecretKey(hashlib.sha256(KEYGEN_TAG + seed.to_bytes(8, "big")).digest())
    source = entropy or secrets.token_bytes
    try:
        data = source(KEY_BYTES)
    except (OSError, NotImplementedError) as exc:
        raise EntropyError("entropy unavailable") from exc
    if not isinstance(data, (bytes, bytearray)) or len(data) != KEY_BYTES:
        raise EntropyError("entropy unavailable")
    return SecretKey(bytes(data))


class _HashDRBG:
    """SHA-256 counter-mode bit generator yielding 64-bit words."""

    def __init__(self, seed: bytes):
        self._seed = seed
        self._counter = 0
        self._words: Iterator[int] = iter(())

    def _refill(self) -> None:
        block = hashlib.sha256(self._seed + self._counter.to_bytes(8, "big")).digest()
        self._counter += 1
        self._words = iter(struct.unpack(">4Q", block))

    def next_u64(self) -> int:
        for word in self._words:
            return word
        self._refill()
        return next(self._words)

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)`` by rejection sampling."""
        limit = _U64 - (_U64 % bound)
        while True:
            word = self.next_u64()
            if word < limit:
                return word % bound


class Permutation:
    """Immutable bijection on ``{0, ..., n-1}``.

    ``map[k]`` is the source index whose value lands at position ``k`` when
    the permutation is applied to a vector (``out[k] = in[map[k]]``).
    """

    __slots__ = ("_map",)

    def __init__(self, mapping: Sequence[int] | np.ndarray):
        arr = np.array(mapping, dtype=np.int64).reshape(-1)
        if arr.size == 0:
            raise ValueError("empty permutation")
        if not np.array_equal(np.sort(arr), np.arange(arr.size)):
            raise ValueError("not a permutation of 0..n-1")
        arr.setflags(write=False)
        self._map = arr

    @property
    def map(self) -> np.ndarray:
        return self._map

    @property
    def n(self) -> int:
        return int(self._map.size)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Permutation):
            return NotImplemented
        return np.array_equal(self._map, other._map)

    def __hash__(self) -> int:
        return hash(self._map.tobytes())

    def __repr__(self) -> str:
        if self.n <= 16:
            return f"Permutation({self._map.tolist()})"
        return f"Permutation(n={self.n})"

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    def apply(self, vector):
        """Return ``vector`` permuted so that ``out[k] = vector[map[k]]``."""
        return np.asarray(vector)[..., self._map]

    def to_text(self) -> str:
        return ",".join(str(i) for i in self._map.tolist())

    @classmethod
    def from_text(cls, text: str) -> "Permutation":
        return cls([int(tok) for tok in text.strip().split(",")])


def derive_permutation(key: SecretKey, n: int) -> Permutation:
    """Deterministically map ``(key, n)`` to a permutation of ``range(n)``."""
    if n < 1:
        raise ValueError("empty permutation")
    if n > _MAX_COUNT:
        raise OverflowError("permutation length exceeds 64-bit count")
    seed = hashlib.sha256(key.data + n.to_bytes(8, "big") + PERM_TAG).digest()
    drbg = _HashDRBG(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = drbg.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return Permutation(perm)


def invert(p: Permutation) -> Permutation:
    """Return ``q`` with ``q[p[k]] == k`` for every ``k``."""
    inv = np.empty(p.n, dtype=np.int64)
    inv[p.map] = np.arange(p.n)
    return Permutation(inv)


def compose(p: Permutation, q: Permutation) -> Permutation:
    """Permutation equivalent to applying ``p`` first, then ``q``."""
    if p.n != q.n:
        raise ValueError("permutation length mismatch")
    return Permutation(p.map[q.map])


def key_space_size(channels: int, block_size: int) -> int:
    """Exact number of distinct block permutations, ``(c*M*M)!``."""
    if channels < 1 or block_size < 1:
        raise ValueError("channels and block size must be >= 1")
    n = channels * block_size * block_size
    if n > _MAX_COUNT:
        raise OverflowError("c*M*M exceeds 64-bit count")
    return math.factorial(n)


def key_space_bits(channels: int, block_size: int) -> float:
    """``log2`` of :func:`key_space_size`, computed without the factorial."""
    n = channels * block_size * block_size
    return math.lgamma(n + 1) / math.log(2)


def effective_key_bits(channels: int, block_size: int) -> float:
    return min(8.0 * KEY_BYTES, key_space_bits(channels, block_size))


def displacement_fraction(p: Permutation, q: Permutation) -> float:
    """Fraction of positions at which two permutations disagree."""
    if p.n != q.n:
        raise ValueError("permutation length mismatch")
    return float(np.mean(p.map != q.map))
