"""Typed message payloads: one type byte followed by a length-prefixed body."""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .crypto import DIGEST_SIZE, Reader, lp


class PayloadKind(enum.IntEnum):
    INLINE = 0
    OBJECT_REF = 1
    CHANNEL_REF = 2
    TX_ADDRESS = 3
    CERTIFICATE = 4


class ChannelKind(enum.IntEnum):
    FEATURE = 1
    SESSION = 2
    INDEX = 3

    @property
    def tag(self) -> bytes:
        return bytes([self.value])


@dataclass(frozen=True)
class ObjectRef:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != DIGEST_SIZE:
            raise ValueError("object digest must be 32 bytes")

    def hex(self) -> str:
        return self.digest.hex()


@dataclass(frozen=True)
class ChannelRef:
    kind: ChannelKind
    root: bytes
    feature_name: str | None = None

    def serialize(self) -> bytes:
        return bytes([self.kind]) + self.root + lp((self.feature_name or "").encode())

    @classmethod
    def deserialize(cls, data: bytes) -> "ChannelRef":
        r = Reader(data)
        kind = ChannelKind(r.u8())
        root = r.take(DIGEST_SIZE)
        name = r.lp().decode() or None
        r.finish()
        return cls(kind, root, name)

    def to_json(self) -> dict:
        return {"kind": self.kind.name.lower(), "root": self.root.hex(),
                "feature": self.feature_name}

    @classmethod
    def from_json(cls, d: dict) -> "ChannelRef":
        return cls(ChannelKind[d["kind"].upper()], bytes.fromhex(d["root"]), d.get("feature"))


@dataclass(frozen=True)
class Payload:
    kind: PayloadKind
    body: bytes

    @classmethod
    def inline(cls, data: bytes) -> "Payload":
        return cls(PayloadKind.INLINE, data)

    @classmethod
    def object_ref(cls, ref: ObjectRef) -> "Payload":
        return cls(PayloadKind.OBJECT_REF, ref.digest)

    @classmethod
    def channel_ref(cls, ref: ChannelRef) -> "Payload":
        return cls(PayloadKind.CHANNEL_REF, ref.serialize())

    @classmethod
    def tx_address(cls, address: bytes) -> "Payload":
        return cls(PayloadKind.TX_ADDRESS, address)

    @classmethod
    def certificate(cls, cert_bytes: bytes) -> "Payload":
        return cls(PayloadKind.CERTIFICATE, cert_bytes)

    def as_object_ref(self) -> ObjectRef:
        self._expect(PayloadKind.OBJECT_REF)
        return ObjectRef(self.body)

    def as_channel_ref(self) -> ChannelRef:
        self._expect(PayloadKind.CHANNEL_REF)
        return ChannelRef.deserialize(self.body)

    def _expect(self, kind: PayloadKind) -> None:
        if self.kind != kind:
            raise ValueError(f"payload is {self.kind.name}, not {kind.name}")

    def serialize(self) -> bytes:
        return bytes([self.kind]) + lp(self.body)

    @classmethod
    def deserialize(cls, data: bytes) -> "Payload":
        r = Reader(data)
        kind = PayloadKind(r.u8())
        body = r.lp()
        r.finish()
        return cls(kind, body)
