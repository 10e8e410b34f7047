"""Hashing, signatures, authenticated encryption and the binary codec.

All byte layouts are big-endian and byte strings are prefixed with a 4-byte
length, so every serialization in the package can be reproduced bit-exactly.
"""
from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DIGEST_SIZE = 32
ADDRESS_SIZE = 20
SIGNATURE_SIZE = 64
ZERO_DIGEST = bytes(DIGEST_SIZE)


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def be32(n: int) -> bytes:
    return struct.pack(">I", n)


def be64(n: int) -> bytes:
    return struct.pack(">Q", n)


def sbe64(n: int) -> bytes:
    return struct.pack(">q", n)


def lp(data: bytes) -> bytes:
    """Length-prefix ``data`` with a 4-byte big-endian size."""
    return be32(len(data)) + data


class Reader:
    """Cursor over a byte string for decoding canonical serializations."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated input")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack(">q", self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> bool:
        return self.pos == len(self.data)

    def finish(self) -> None:
        if not self.done():
            raise ValueError("trailing bytes")


# -- signatures --------------------------------------------------------------

def address_of(public_key: bytes) -> bytes:
    """Account address: first 20 bytes of SHA-256 of the raw public key."""
    return sha256(public_key)[:ADDRESS_SIZE]


@dataclass(frozen=True)
class KeyPair:
    """Ed25519 key pair rebuilt deterministically from a 32-byte seed."""

    secret: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.secret) != 32:
            raise ValueError("key seed must be 32 bytes")

    @property
    def _private(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.secret)

    @property
    def public_key(self) -> bytes:
        return self._private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    @property
    def address(self) -> bytes:
        return address_of(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# -- authenticated encryption ------------------------------------------------

def keystream(key: bytes, length: int) -> bytes:
    """SHA-256 in counter mode: block i = H(key || "enc" || be64(i))."""
    blocks = []
    for i in range((length + DIGEST_SIZE - 1) // DIGEST_SIZE):
        blocks.append(sha256(key, b"enc", be64(i)))
    return b"".join(blocks)[:length]


def xor_stream(key: bytes, data: bytes) -> bytes:
    if not data:
        return b""
    ks = keystream(key, len(data))
    x = int.from_bytes(data, "big") ^ int.from_bytes(ks, "big")
    return x.to_bytes(len(data), "big")


def mac(key: bytes, ciphertext: bytes) -> bytes:
    return sha256(key, ciphertext)


def mac_ok(key: bytes, ciphertext: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(mac(key, ciphertext), tag)


def seal(key: bytes, plaintext: bytes) -> bytes:
    """Encrypt and append the 32-byte tag (used for stored objects)."""
    ct = xor_stream(key, plaintext)
    return ct + mac(key, ct)


def unseal(key: bytes, blob: bytes) -> bytes | None:
    """Inverse of :func:`seal`; ``None`` when the tag does not verify."""
    if len(blob) < DIGEST_SIZE:
        return None
    ct, tag = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if not mac_ok(key, ct, tag):
        return None
    return xor_stream(key, ct)


def derive_key(master_key: bytes, root: bytes) -> bytes:
    """Per-message key: SHA-256(master_key || root)."""
    return sha256(master_key, root)
