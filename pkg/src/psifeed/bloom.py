"""Bloom filter over 32-byte group elements.

Position ``i`` of an element is the ``i``-th big-endian 64-bit word of
SHAKE-256(element), reduced mod ``m``.  Double hashing (``h1 + i*h2 mod m``)
cannot go below a false-positive floor of about ``n/m**2``, which is several
times 2**-20 at the sizes used here, so every position gets its own word.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Iterable

from psifeed.errors import InputError

DEFAULT_FP_RATE = 2.0**-20
_HEADER = struct.Struct(">IBd")


@dataclass(frozen=True)
class BloomParams:
    n: int
    e: float
    m: int
    k_hashes: int

    @classmethod
    def for_rate(cls, n: int, e: float) -> "BloomParams":
        check_rate(e)
        n = max(int(n), 1)
        m = max(8, math.ceil(-n * math.log(e) / math.log(2) ** 2))
        k = max(1, round(m / n * math.log(2)))
        return cls(n, e, m, k)


def check_rate(e: float) -> float:
    if not (isinstance(e, (int, float)) and 0.0 < e <= 0.5):
        raise InputError(f"false-positive rate {e!r} outside (0, 0.5]")
    return float(e)


def _positions(x: bytes, m: int, k: int) -> list[int]:
    d = hashlib.shake_256(x).digest(8 * k)
    return [int.from_bytes(d[8 * i:8 * i + 8], "big") % m for i in range(k)]


class BloomFilter:
    def __init__(self, params: BloomParams, bits: bytes | bytearray | None = None):
        self.params = params
        nbytes = (params.m + 7) // 8
        if bits is None:
            bits = bytes(nbytes)
        if len(bits) != nbytes:
            raise InputError(f"bit array is {len(bits)} bytes, expected {nbytes}")
        self._bits = bytearray(bits)

    @property
    def m(self) -> int:
        return self.params.m

    @property
    def k_hashes(self) -> int:
        return self.params.k_hashes

    @property
    def bits(self) -> bytes:
        return bytes(self._bits)

    def add(self, x: bytes) -> None:
        for pos in _positions(x, self.params.m, self.params.k_hashes):
            self._bits[pos >> 3] |= 1 << (pos & 7)

    def __contains__(self, x: bytes) -> bool:
        bits = self._bits
        return all(bits[pos >> 3] >> (pos & 7) & 1 for pos in _positions(x, self.params.m, self.params.k_hashes))

    def popcount(self) -> int:
        return sum(bin(b).count("1") for b in self._bits)

    def __eq__(self, other):
        if not isinstance(other, BloomFilter):
            return NotImplemented
        return (self.params.m, self.params.k_hashes, self.params.e, self._bits) == (
            other.params.m, other.params.k_hashes, other.params.e, other._bits)

    def __repr__(self):
        p = self.params
        return f"BloomFilter(m={p.m}, k_hashes={p.k_hashes}, e={p.e!r}, set_bits={self.popcount()})"

    def to_bytes(self) -> bytes:
        p = self.params
        return _HEADER.pack(p.m, p.k_hashes, p.e) + bytes(self._bits)

    @classmethod
    def from_bytes(cls, data: bytes, n: int = 0) -> tuple["BloomFilter", int]:
        """Decode one filter from the start of ``data``; returns it with the bytes consumed."""
        if len(data) < _HEADER.size:
            raise InputError("truncated bloom header")
        m, k, e = _HEADER.unpack_from(data)
        if m < 8 or k < 1:
            raise InputError(f"invalid bloom parameters m={m} k={k}")
        check_rate(e)
        end = _HEADER.size + (m + 7) // 8
        if len(data) < end:
            raise InputError("truncated bloom bit array")
        return cls(BloomParams(n, e, m, k), data[_HEADER.size:end]), end


def bloom_build(elements: Iterable[bytes], e: float = DEFAULT_FP_RATE) -> BloomFilter:
    elements = list(elements)
    f = BloomFilter(BloomParams.for_rate(len(elements), e))
    for x in elements:
        f.add(x)
    return f


def bloom_contains(f: BloomFilter, x: bytes) -> bool:
    return x in f
