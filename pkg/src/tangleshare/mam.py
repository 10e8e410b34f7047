"""Masked authenticated messaging over the tangle (restricted mode only).

Each message lives at address H(root). Roots follow
``root_at(seed, i) = H(seed || be64(i) || kind_tag)``, so a channel is a
forward-linked list that anyone holding a root can walk, while only holders
of the per-message key ``H(side_key || root)`` can read it.

A message occupies a bundle of exactly four transactions: one overhead slot
with the routing and authentication metadata, then three ciphertext
fragments zero-padded to ``payload_max``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Callable

from .crypto import (
    DIGEST_SIZE,
    SIGNATURE_SIZE,
    KeyPair,
    Reader,
    be32,
    be64,
    derive_key,
    mac,
    mac_ok,
    sha256,
    verify_signature,
    xor_stream,
)
from .errors import AuthFailure, MissingFeatureName, PayloadTooLarge, WrongChannelKind
from .ledger import NetworkConfig, Tangle, Transaction, attach
from .payload import ChannelKind, ChannelRef, Payload, PayloadKind

BUNDLE_LEN = 4
FRAGMENTS = BUNDLE_LEN - 1
MAGIC = b"MAM1"
OVERHEAD_SIZE = len(MAGIC) + 6 * DIGEST_SIZE + SIGNATURE_SIZE + 4


def root_at(seed: bytes, index: int, kind: ChannelKind) -> bytes:
    return sha256(seed, be64(index), kind.tag)


def signing_key(seed: bytes, index: int) -> KeyPair:
    return KeyPair(sha256(seed, b"sig", be64(index)))


def address_of_root(root: bytes) -> bytes:
    return sha256(root)


@dataclass
class ChannelState:
    seed: bytes
    kind: ChannelKind
    side_key: bytes
    feature_name: str | None = None
    index: int = 0

    @property
    def current_root(self) -> bytes:
        return root_at(self.seed, self.index, self.kind)

    @property
    def entry_root(self) -> bytes:
        return root_at(self.seed, 0, self.kind)

    def ref(self) -> ChannelRef:
        return ChannelRef(self.kind, self.entry_root, self.feature_name)


@dataclass(frozen=True)
class MamMessage:
    root: bytes
    next_root: bytes
    address: bytes
    ciphertext: bytes
    auth_tag: bytes
    signature: bytes
    pubkey: bytes
    next_pubkey: bytes

    def signed_bytes(self) -> bytes:
        return self.root + self.next_root + self.next_pubkey + self.ciphertext

    def overhead(self) -> bytes:
        return (MAGIC + self.address + self.root + self.next_root + self.pubkey
                + self.next_pubkey + self.signature + self.auth_tag + be32(len(self.ciphertext)))

    def fragments(self, payload_max: int) -> list[bytes]:
        out = []
        for k in range(FRAGMENTS):
            chunk = self.ciphertext[k * payload_max:(k + 1) * payload_max]
            out.append(chunk + bytes(payload_max - len(chunk)))
        return out

    @classmethod
    def from_bundle(cls, txs: list[Transaction]) -> "MamMessage":
        if len(txs) != BUNDLE_LEN:
            raise ValueError("a MAM bundle has exactly four transactions")
        r = Reader(txs[0].payload)
        if r.take(len(MAGIC)) != MAGIC:
            raise ValueError("not a MAM overhead slot")
        address, root, next_root, pubkey, next_pubkey = (r.take(DIGEST_SIZE) for _ in range(5))
        signature = r.take(SIGNATURE_SIZE)
        auth_tag = r.take(DIGEST_SIZE)
        length = r.u32()
        r.finish()
        ciphertext = b"".join(tx.payload for tx in txs[1:])[:length]
        if len(ciphertext) != length:
            raise ValueError("ciphertext truncated")
        return cls(root, next_root, address, ciphertext, auth_tag, signature, pubkey,
                   next_pubkey)


def create_channel(seed: bytes, kind: ChannelKind, side_key: bytes,
                   feature_name: str | None = None) -> ChannelState:
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    if kind == ChannelKind.FEATURE and not feature_name:
        raise MissingFeatureName("a feature channel needs a feature name")
    return ChannelState(seed, kind, side_key, feature_name if kind == ChannelKind.FEATURE else None)


def max_payload(config: NetworkConfig) -> int:
    return FRAGMENTS * config.payload_max


def publish(channel: ChannelState, tangle: Tangle, payload: Payload, config: NetworkConfig,
            rng_seed: int | None = None) -> tuple[MamMessage, list[Transaction]]:
    """Encrypt, sign and attach ``payload`` as the channel's next message."""
    if config.payload_max < OVERHEAD_SIZE:
        raise ValueError(f"payload_max must be at least {OVERHEAD_SIZE} for MAM")
    plain = payload.serialize()
    if len(plain) > max_payload(config):
        raise PayloadTooLarge(f"serialized payload of {len(plain)} bytes exceeds "
                              f"{max_payload(config)}")
    i = channel.index
    root = root_at(channel.seed, i, channel.kind)
    next_root = root_at(channel.seed, i + 1, channel.kind)
    signer = signing_key(channel.seed, i)
    next_pubkey = signing_key(channel.seed, i + 1).public_key
    key = derive_key(channel.side_key, root)
    ciphertext = xor_stream(key, plain)
    unsigned = MamMessage(root, next_root, address_of_root(root), ciphertext, mac(key, ciphertext),
                          b"", signer.public_key, next_pubkey)
    msg = replace(unsigned, signature=signer.sign(unsigned.signed_bytes()))
    seed = int.from_bytes(root[:8], "big") if rng_seed is None else rng_seed
    bundle = attach(tangle, [msg.overhead(), *msg.fragments(config.payload_max)], config, seed,
                    address=msg.address)
    channel.index = i + 1
    return msg, bundle


def read_message(tangle: Tangle, address: bytes,
                 expected_pubkey: bytes | None = None) -> MamMessage | None:
    """The authentic message stored at ``address``, or ``None`` if absent.

    Bundles at the address that fail to parse or verify are skipped; if
    bundles exist but none verifies, :class:`AuthFailure` is raised.
    """
    bundles = tangle.find(address)
    if not bundles:
        return None
    for txs in bundles:
        try:
            msg = MamMessage.from_bundle(txs)
        except ValueError:
            continue
        if address_of_root(msg.root) != address or msg.address != address:
            continue
        if expected_pubkey is not None and msg.pubkey != expected_pubkey:
            continue
        if verify_signature(msg.pubkey, msg.signed_bytes(), msg.signature):
            return msg
    raise AuthFailure(f"no authentic message at {address.hex()}")


def walk_chain(tangle: Tangle, entry_root: bytes, limit: int | None = None) -> list[MamMessage]:
    """Follow next_root links from ``entry_root``; needs no decryption key."""
    out: list[MamMessage] = []
    root, expected = entry_root, None
    while limit is None or len(out) < limit:
        msg = read_message(tangle, address_of_root(root), expected)
        if msg is None:
            break
        out.append(msg)
        root, expected = msg.next_root, msg.next_pubkey
    return out


def decrypt_message(msg: MamMessage, key: bytes) -> Payload:
    if not mac_ok(key, msg.ciphertext, msg.auth_tag):
        raise AuthFailure(f"authentication tag mismatch at {msg.address.hex()}")
    try:
        return Payload.deserialize(xor_stream(key, msg.ciphertext))
    except ValueError as exc:
        raise AuthFailure(f"malformed plaintext at {msg.address.hex()}") from exc


def fetch_messages(tangle: Tangle, entry_root: bytes, key_for: Callable[[bytes], bytes | None],
                   limit: int | None = None) -> list[tuple[MamMessage, Payload]]:
    """Decrypt a stream using ``key_for(root)``; stops where no key is available."""
    out = []
    for msg in walk_chain(tangle, entry_root, limit):
        key = key_for(msg.root)
        if key is None:
            break
        out.append((msg, decrypt_message(msg, key)))
    return out


def fetch_stream(tangle: Tangle, entry_root: bytes, side_key: bytes,
                 limit: int | None = None) -> list[Payload]:
    return [p for _, p in fetch_messages(
        tangle, entry_root, lambda root: derive_key(side_key, root), limit)]


def register_channel(index_channel: ChannelState, tangle: Tangle, ref: ChannelRef,
                     config: NetworkConfig) -> MamMessage:
    if index_channel.kind != ChannelKind.INDEX:
        raise WrongChannelKind("channels can only be registered in an index channel")
    msg, _ = publish(index_channel, tangle, Payload.channel_ref(ref), config)
    return msg


def open_session(index_channel: ChannelState, tangle: Tangle, config: NetworkConfig,
                 seed: bytes | None = None, side_key: bytes | None = None) -> ChannelState:
    """Create a session channel and register it in the index channel.

    The session inherits the index channel's side key unless one is given.
    """
    if index_channel.kind != ChannelKind.INDEX:
        raise WrongChannelKind("sessions are opened from an index channel")
    session = create_channel(seed if seed is not None else os.urandom(32), ChannelKind.SESSION,
                             side_key if side_key is not None else index_channel.side_key)
    register_channel(index_channel, tangle, session.ref(), config)
    return session


def record_in_session(session: ChannelState, tangle: Tangle, tx_address: bytes,
                      config: NetworkConfig) -> MamMessage:
    if session.kind != ChannelKind.SESSION:
        raise WrongChannelKind("not a session channel")
    msg, _ = publish(session, tangle, Payload.tx_address(tx_address), config)
    return msg


def channel_hierarchy(tangle: Tangle, index_root: bytes, side_key: bytes) -> list[ChannelRef]:
    """Every channel registered in the index stream, in registration order."""
    return [p.as_channel_ref() for p in fetch_stream(tangle, index_root, side_key)
            if p.kind == PayloadKind.CHANNEL_REF]
