import os

import pytest

import oracles
from tangleshare.crypto import KeyPair
from tangleshare.errors import IntegrityFailure, InvalidTopic, NotFound
from tangleshare.payload import ObjectRef, Payload, PayloadKind
from tangleshare.pol import LocationCertificate, PkiRegistry, issue_certificate, verify_certificate
from tangleshare.store import ObjectStore, PubSubBus, Topic, make_payload, open_payload

KEY = b"\x11" * 32


@pytest.fixture(params=["memory", "disk"])
def store(request, tmp_path):
    return ObjectStore() if request.param == "memory" else ObjectStore(tmp_path)


def test_put_idempotent(store):
    assert store.put(b"abc") == store.put(b"abc")


def test_roundtrip(store):
    ref = store.put(b"hello")
    assert store.get(ref) == b"hello"
    assert ref in store


def test_digest_matches_oracle(store):
    data = os.urandom(300)
    assert store.put(data).digest == oracles.sha256(data)


def test_unknown_ref(store):
    with pytest.raises(NotFound):
        store.get(ObjectRef(bytes(32)))


def test_tamper_detected(tmp_path):
    store = ObjectStore(tmp_path)
    ref = store.put(b"original")
    (tmp_path / "objects" / ref.hex()).write_bytes(b"tampered")
    with pytest.raises(IntegrityFailure):
        store.get(ref)


def test_one_mib(store):
    data = os.urandom(1 << 20)
    assert store.get(store.put(data)) == data


def test_empty_object_rejected(store):
    with pytest.raises(ValueError):
        store.put(b"")


def test_small_datum_inline():
    latlon = (44494000).to_bytes(8, "big") + (11342000).to_bytes(8, "big")
    assert make_payload(latlon, 256).kind == PayloadKind.INLINE


def test_large_datum_by_reference(store):
    trace = os.urandom(10_000)
    p = make_payload(trace, 256, store, KEY)
    assert p.kind == PayloadKind.OBJECT_REF
    assert open_payload(p, store, KEY) == trace
    # stored bytes are ciphertext
    assert store.get(p.as_object_ref()) != trace


def test_inline_boundary():
    assert make_payload(bytes(256), 256).kind == PayloadKind.INLINE
    with pytest.raises(ValueError):
        make_payload(bytes(257), 256)


def test_object_wrong_key(store):
    p = make_payload(os.urandom(1000), 256, store, KEY)
    with pytest.raises(IntegrityFailure):
        open_payload(p, store, b"\x12" * 32)


def test_payload_codec():
    for p in (Payload.inline(b"x"), Payload.object_ref(ObjectRef(bytes(32))),
              Payload.tx_address(b"\x01" * 32)):
        assert Payload.deserialize(p.serialize()) == p


def test_ancestor_delivery():
    bus = PubSubBus()
    sub = bus.subscribe("it/bologna")
    bus.publish("it/bologna/centro", b"m")
    (ev,) = sub.drain()
    assert ev.message == b"m" and str(ev.topic) == "it/bologna/centro"


def test_sibling_not_delivered():
    bus = PubSubBus()
    sub = bus.subscribe("it/milano")
    bus.publish("it/bologna", b"m")
    assert sub.drain() == []


def test_prefix_is_by_label_not_string():
    bus = PubSubBus()
    sub = bus.subscribe("it/bo")
    bus.publish("it/bologna", b"m")
    assert sub.drain() == []


def test_sequence_order():
    bus = PubSubBus()
    sub = bus.subscribe("it")
    for i in range(100):
        bus.publish("it", bytes([i]))
    events = sub.drain()
    assert [e.seq for e in events] == list(range(1, 101))
    assert [e.message for e in events] == [bytes([i]) for i in range(100)]


def test_certificate_over_pubsub():
    registry = PkiRegistry()
    ord_key = KeyPair(b"\x21" * 32)
    registry.register("ord-7", ord_key.public_key)
    cert = issue_certificate(registry, "ord-7", ord_key, (44494000, 11342000), 30,
                             KeyPair(b"\x22" * 32).address, 1234)
    bus = PubSubBus()
    sub = bus.subscribe("it/bologna")
    bus.publish("it/bologna/centro", cert.serialize())
    received = LocationCertificate.deserialize(sub.get(timeout=1).message)
    assert verify_certificate(registry, received)


def test_unsubscribe():
    bus = PubSubBus()
    sub = bus.subscribe("it")
    sub.unsubscribe()
    bus.publish("it", b"m")
    assert sub.drain() == []


def test_fan_out():
    bus = PubSubBus()
    a, b = bus.subscribe("it"), bus.subscribe("it/bologna")
    bus.publish("it/bologna", b"same")
    assert a.drain()[0].message == b.drain()[0].message == b"same"


@pytest.mark.parametrize("bad", ["", "It/x", "a//b", "a b", "über"])
def test_invalid_topic(bad):
    with pytest.raises(InvalidTopic):
        Topic.parse(bad)
