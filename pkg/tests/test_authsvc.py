import json
import os
import socket
import struct
import threading

import pytest

import oracles
from tangleshare import mam
from tangleshare.authsvc import (
    AuthService,
    KeyRequest,
    UserRegistration,
    derive_key,
    request_keys,
    serve,
)
from tangleshare.contracts import ContractState
from tangleshare.crypto import KeyPair
from tangleshare.errors import BadSignature
from tangleshare.ledger import Tangle
from tangleshare.payload import ChannelKind, Payload

OWNER, BUYER, OTHER = (KeyPair(bytes([i]) * 32) for i in (0x41, 0x42, 0x43))
MASTER = b"\x4d" * 32


class Market:
    """Owner with an index channel and two feature channels, plus a funded buyer."""

    def __init__(self, config):
        self.config = config
        self.tangle = Tangle()
        self.contracts = ContractState.with_genesis({OWNER.address: 0, BUYER.address: 100,
                                                     OTHER.address: 100})
        for k in (OWNER, BUYER, OTHER):
            self.contracts.register_key(k.public_key)
        self.cid = self.contracts.deploy_feature_contract(OWNER.address)
        self.index = mam.create_channel(b"\x49" * 32, ChannelKind.INDEX, MASTER)
        self.features = {}
        self.messages = {}
        for name in ("speed", "temp"):
            seed = name.encode().ljust(32, b"\0")
            ch = mam.create_channel(seed, ChannelKind.FEATURE, MASTER, name)
            mam.register_channel(self.index, self.tangle, ch.ref(), config)
            self.features[name] = ch
            self.messages[name] = [
                mam.publish(ch, self.tangle, Payload.inline(f"{name}-{i}".encode()), config)[0]
                for i in range(2)]
        self.service = AuthService(self.tangle, self.contracts)
        self.registration = UserRegistration(OWNER.address, MASTER, self.index.entry_root,
                                             self.cid)
        self.service.register_user(self.registration, self.registration.sign(OWNER))

    def sell(self, items, price=10):
        return self.contracts.add_bundle(self.cid, OWNER.address, items, price)


@pytest.fixture
def market(fast_config):
    return Market(fast_config)


def test_derive_key_zero_vector():
    assert derive_key(bytes(32), bytes(32)) == oracles.SHA256_64_ZEROS


def test_derive_key_matches_oracle():
    for _ in range(10):
        m, r = os.urandom(32), os.urandom(32)
        assert derive_key(m, r) == oracles.sha256(m + r)


def test_derive_key_deterministic_and_sensitive():
    r = os.urandom(32)
    assert derive_key(MASTER, r) == derive_key(MASTER, r)
    flipped = bytes([r[0] ^ 1]) + r[1:]
    assert derive_key(MASTER, r) != derive_key(MASTER, flipped)


def test_registration_wrong_key(market):
    reg = market.registration
    with pytest.raises(BadSignature):
        market.service.register_user(reg, reg.sign(OTHER))


def test_resolves_both_features(market):
    roots = {r.root for r in market.service.resolve_channels(OWNER.address)}
    assert roots == {ch.entry_root for ch in market.features.values()}


def test_granted_tx_key_decrypts(market):
    msg = market.messages["speed"][1]
    bid = market.sell([msg.address])
    market.contracts.purchase_access(BUYER.address, market.cid, bid)
    resp = market.service.handle_key_request(KeyRequest.signed(BUYER, [msg.address]))
    key = resp.key_for(msg.address)
    assert key == derive_key(MASTER, msg.root)
    assert mam.decrypt_message(mam.read_message(market.tangle, msg.address), key).body == b"speed-1"


def test_no_grant_no_key(market):
    msg = market.messages["speed"][0]
    market.sell([msg.address])
    resp = market.service.handle_key_request(KeyRequest.signed(BUYER, [msg.address]))
    assert resp.denials() == ["AccessDenied"]
    assert "key" not in json.dumps(resp.to_json())


def test_mixed_request(market):
    granted, refused = market.messages["speed"][0], market.messages["temp"][0]
    bid = market.sell([granted.address])
    market.contracts.purchase_access(BUYER.address, market.cid, bid)
    resp = market.service.handle_key_request(
        KeyRequest.signed(BUYER, [granted.address, refused.address]))
    assert resp.key_for(granted.address) is not None
    assert resp.key_for(refused.address) is None
    assert resp.denials() == ["AccessDenied"]


def test_channel_grant(market):
    ref = market.features["temp"].ref()
    bid = market.sell([ref])
    market.contracts.purchase_access(BUYER.address, market.cid, bid)
    resp = market.service.handle_key_request(KeyRequest.signed(BUYER, [ref]))
    keys = resp.channel_keys(ref.root)
    got = mam.fetch_messages(market.tangle, ref.root, keys.get)
    assert [p.body for _, p in got] == [b"temp-0", b"temp-1"]
    # a channel grant also covers single messages inside it
    one = market.messages["temp"][1].address
    assert market.service.handle_key_request(KeyRequest.signed(BUYER, [one])).key_for(one)


def test_unknown_item(market):
    resp = market.service.handle_key_request(KeyRequest.signed(BUYER, [b"\x00" * 32]))
    assert resp.denials() == ["UnknownItem"]


def test_owner_reads_own(market):
    msg = market.messages["speed"][0]
    resp = market.service.handle_key_request(KeyRequest.signed(OWNER, [msg.address]))
    assert resp.key_for(msg.address) == derive_key(MASTER, msg.root)


def test_request_signature_checked(market):
    msg = market.messages["speed"][0]
    req = KeyRequest.signed(OTHER, [msg.address])
    spoofed = KeyRequest(BUYER.address, req.items, req.sig)
    with pytest.raises(BadSignature):
        market.service.handle_key_request(spoofed)


@pytest.fixture
def server(market):
    srv = serve(market.service, "127.0.0.1", 0)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def test_tcp_roundtrip(market, server):
    host, port = server.server_address[:2]
    msg = market.messages["speed"][0]
    bid = market.sell([msg.address])
    market.contracts.purchase_access(BUYER.address, market.cid, bid)
    resp = request_keys(host, port, KeyRequest.signed(BUYER, [msg.address]))
    assert resp.key_for(msg.address) == derive_key(MASTER, msg.root)


def test_tcp_wire_format(market, server):
    host, port = server.server_address[:2]
    msg = market.messages["speed"][0]
    body = json.dumps(KeyRequest.signed(BUYER, [msg.address]).to_json()).encode()
    with socket.create_connection((host, port), timeout=5) as sock:
        sock.sendall(struct.pack(">I", len(body)) + body)
        (n,) = struct.unpack(">I", sock.recv(4, socket.MSG_WAITALL))
        reply = json.loads(sock.recv(n, socket.MSG_WAITALL))
    assert reply == {"items": [{"ref": {"tx": msg.address.hex()}, "denied": "AccessDenied"}]}


def test_tcp_bad_signature(market, server):
    host, port = server.server_address[:2]
    req = KeyRequest(BUYER.address, (b"\x00" * 32,), b"\x00" * 64)
    with pytest.raises(BadSignature):
        request_keys(host, port, req)
