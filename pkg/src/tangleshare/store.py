"""Content-addressed object store and the zone-hierarchical pub/sub bus."""
from __future__ import annotations

import os
import queue
import re
import threading
from dataclasses import dataclass
from pathlib import Path

from .crypto import seal, sha256, unseal
from .errors import IntegrityFailure, InvalidTopic, NotFound
from .payload import ObjectRef, Payload, PayloadKind

DEFAULT_INLINE_MAX = 256


class ObjectStore:
    """Immutable blobs keyed by their SHA-256.

    With ``root`` set, objects live in ``<root>/objects/<hex-digest>``;
    otherwise they are kept in memory.
    """

    def __init__(self, root: str | os.PathLike | None = None):
        self.dir = Path(root) / "objects" if root is not None else None
        self._mem: dict[bytes, bytes] = {}
        self._lock = threading.Lock()
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def put(self, data: bytes) -> ObjectRef:
        if not data:
            raise ValueError("cannot store an empty object")
        digest = sha256(data)
        if self.dir is None:
            with self._lock:
                self._mem.setdefault(digest, bytes(data))
        else:
            path = self.dir / digest.hex()
            if not path.exists():
                tmp = path.with_suffix(f".tmp{threading.get_ident()}")
                tmp.write_bytes(data)
                os.replace(tmp, path)
        return ObjectRef(digest)

    def get(self, ref: ObjectRef) -> bytes:
        if self.dir is None:
            try:
                data = self._mem[ref.digest]
            except KeyError:
                raise NotFound(ref.hex()) from None
        else:
            try:
                data = (self.dir / ref.hex()).read_bytes()
            except FileNotFoundError:
                raise NotFound(ref.hex()) from None
        if sha256(data) != ref.digest:
            raise IntegrityFailure(f"object {ref.hex()} does not match its digest")
        return data

    def __contains__(self, ref: ObjectRef) -> bool:
        if self.dir is None:
            return ref.digest in self._mem
        return (self.dir / ref.hex()).exists()


def make_payload(data: bytes, inline_max: int = DEFAULT_INLINE_MAX,
                 store: ObjectStore | None = None, key: bytes | None = None) -> Payload:
    """Inline small data; encrypt larger data under ``key`` and store it by reference."""
    if len(data) <= inline_max:
        return Payload.inline(data)
    if store is None or key is None:
        raise ValueError("a store and a key are required for data above inline_max")
    return Payload.object_ref(store.put(seal(key, data)))


def open_payload(payload: Payload, store: ObjectStore | None = None,
                 key: bytes | None = None) -> bytes:
    """Resolve a data payload back to plaintext bytes."""
    if payload.kind == PayloadKind.INLINE:
        return payload.body
    if payload.kind == PayloadKind.OBJECT_REF:
        if store is None or key is None:
            raise ValueError("a store and a key are required to open an object reference")
        plain = unseal(key, store.get(payload.as_object_ref()))
        if plain is None:
            raise IntegrityFailure("object does not authenticate under the given key")
        return plain
    return payload.body


# -- pub/sub -----------------------------------------------------------------

_LABEL = re.compile(r"^[a-z0-9-]+$")


@dataclass(frozen=True)
class Topic:
    path: tuple[str, ...]

    def __post_init__(self):
        if not self.path or not all(_LABEL.match(p) for p in self.path):
            raise InvalidTopic("/".join(self.path))

    @classmethod
    def parse(cls, text: str) -> "Topic":
        return cls(tuple(text.strip("/").split("/")))

    def is_prefix_of(self, other: "Topic") -> bool:
        return other.path[:len(self.path)] == self.path

    def __str__(self) -> str:
        return "/".join(self.path)


@dataclass(frozen=True)
class Event:
    topic: Topic
    seq: int
    message: bytes


class Subscription:
    def __init__(self, bus: "PubSubBus", topic: Topic):
        self.bus = bus
        self.topic = topic
        self._queue: queue.SimpleQueue[Event] = queue.SimpleQueue()

    def get(self, timeout: float | None = None) -> Event:
        return self._queue.get(timeout=timeout)

    def drain(self) -> list[Event]:
        out = []
        while True:
            try:
                out.append(self._queue.get_nowait())
            except queue.Empty:
                return out

    def unsubscribe(self) -> None:
        self.bus.unsubscribe(self)


class PubSubBus:
    """Loopback bus; a subscriber to S receives every message on a topic under S."""

    def __init__(self):
        self._subs: list[Subscription] = []
        self._seq: dict[Topic, int] = {}
        self._lock = threading.Lock()

    def subscribe(self, topic: Topic | str) -> Subscription:
        if isinstance(topic, str):
            topic = Topic.parse(topic)
        sub = Subscription(self, topic)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, topic: Topic | str, message: bytes) -> int:
        if isinstance(topic, str):
            topic = Topic.parse(topic)
        with self._lock:
            seq = self._seq.get(topic, 0) + 1
            self._seq[topic] = seq
            event = Event(topic, seq, bytes(message))
            for sub in self._subs:
                if sub.topic.is_prefix_of(topic):
                    sub._queue.put(event)
        return seq


def publish_event(bus: PubSubBus, topic: Topic | str, message: bytes) -> int:
    return bus.publish(topic, message)


def subscribe(bus: PubSubBus, topic: Topic | str) -> Subscription:
    return bus.subscribe(topic)
