"""Commutative blinding ``H(x)^k`` over the ristretto255 prime-order group.

Elements are 32-byte canonical ristretto255 encodings held as ``bytes``;
scalars are 32-byte little-endian integers modulo the group order.
libsodium (through ``rbcl``) supplies the group arithmetic.
"""
from __future__ import annotations

import hashlib
import os
import random
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import rbcl

from psifeed.errors import InputError

ELEMENT_BYTES = 32
SCALAR_BYTES = 32
GROUP_ORDER = 2**252 + 27742317777372353535851937790883648493
IDENTITY = bytes(ELEMENT_BYTES)
HASH_DST = b"psifeed-v1-ristretto255_XMD:SHA-512_R255MAP_RO_"


def expand_message_xmd(msg: bytes, dst: bytes, length: int) -> bytes:
    """RFC 9380 expand_message_xmd instantiated with SHA-512."""
    b_len, r_len = 64, 128
    ell = -(-length // b_len)
    if ell > 255 or length > 65535 or len(dst) > 255:
        raise InputError("expand_message_xmd parameters out of range")
    dst_prime = dst + bytes([len(dst)])
    b0 = hashlib.sha512(bytes(r_len) + msg + length.to_bytes(2, "big") + b"\x00" + dst_prime).digest()
    bi = hashlib.sha512(b0 + b"\x01" + dst_prime).digest()
    out = [bi]
    for i in range(2, ell + 1):
        bi = hashlib.sha512(bytes(a ^ b for a, b in zip(b0, bi)) + bytes([i]) + dst_prime).digest()
        out.append(bi)
    return b"".join(out)[:length]


def hash_to_group(token: bytes | str) -> bytes:
    """Map a non-empty token to a non-identity group element (hash_to_ristretto255)."""
    if isinstance(token, str):
        token = token.encode("utf-8")
    if not token:
        raise InputError("cannot hash an empty token")
    uniform = expand_message_xmd(token, HASH_DST, 64)
    point = rbcl.crypto_core_ristretto255_from_hash(uniform)
    if point == IDENTITY:  # pragma: no cover - probability ~2^-252
        raise InputError("token hashed to the identity element")
    return point


def check_element(e: bytes) -> bytes:
    if not isinstance(e, (bytes, bytearray)) or len(e) != ELEMENT_BYTES:
        raise InputError("group element must be exactly 32 bytes")
    e = bytes(e)
    if e == IDENTITY or not rbcl.crypto_core_ristretto255_is_valid_point(e):
        raise InputError("not a canonical non-identity ristretto255 encoding")
    return e


@dataclass(frozen=True)
class SecretKey:
    scalar: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.scalar) != SCALAR_BYTES:
            raise InputError("secret key must be 32 bytes")
        k = int.from_bytes(self.scalar, "little")
        if not 1 <= k < GROUP_ORDER:
            raise InputError("secret key must lie in [1, q-1]")

    @property
    def value(self) -> int:
        return int.from_bytes(self.scalar, "little")

    @cached_property
    def inverse(self) -> bytes:
        return rbcl.crypto_core_ristretto255_scalar_invert(self.scalar)

    @classmethod
    def from_int(cls, k: int) -> "SecretKey":
        return cls((k % GROUP_ORDER).to_bytes(SCALAR_BYTES, "little"))

    def save(self, path: str | Path) -> None:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.scalar)
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path: str | Path) -> "SecretKey":
        return cls(Path(path).read_bytes())


def keygen(rng: random.Random | None = None) -> SecretKey:
    """Uniform scalar in [1, q-1]; OS entropy unless a (seeded) rng is given."""
    while True:
        wide = rng.randbytes(64) if rng is not None else os.urandom(64)
        scalar = rbcl.crypto_core_ristretto255_scalar_reduce(wide)
        if scalar != bytes(SCALAR_BYTES):
            return SecretKey(scalar)


def _mul(scalar: bytes, e: bytes) -> bytes:
    try:
        return rbcl.crypto_scalarmult_ristretto255(scalar, e)
    except RuntimeError:
        raise InputError("invalid group element") from None


def encrypt(e: bytes, sk: SecretKey) -> bytes:
    """Raise ``e`` to the secret exponent."""
    return _mul(sk.scalar, e)


def strip(e: bytes, sk: SecretKey) -> bytes:
    """Remove one layer applied with ``sk``."""
    return _mul(sk.inverse, e)
