"""Key-release service.

Owners register their master key and Index Channel root. The service walks
each owner's channel hierarchy to learn which message roots exist, then
answers signed key requests by checking the owner's feature-contract ACL and
releasing ``derive_key(master_key, root)`` for every granted item.

The same :meth:`AuthService.handle_key_request` backs both the in-process API
and the TCP server, which speaks 4-byte big-endian length-prefixed UTF-8 JSON.
"""
from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

from . import mam
from .contracts import ContractState, Item, canonical, item_from_json, item_to_json
from .crypto import KeyPair, derive_key, verify_signature
from .errors import (
    AuthFailure,
    BadSignature,
    UnknownAccount,
    UnknownContract,
)
from .ledger import Tangle
from .payload import ChannelRef

__all__ = [
    "derive_key", "UserRegistration", "KeyRequest", "KeyResponse", "AuthService",
    "serve", "request_keys",
]


@dataclass(frozen=True)
class UserRegistration:
    owner: bytes
    master_key: bytes
    index_root: bytes
    contract_id: bytes

    def body(self) -> bytes:
        return b"register" + self.owner + self.master_key + self.index_root + self.contract_id

    def sign(self, key: KeyPair) -> bytes:
        return key.sign(self.body())

    def to_json(self, signature: bytes) -> dict:
        return {"owner": self.owner.hex(), "master_key": self.master_key.hex(),
                "index_root": self.index_root.hex(), "contract_id": self.contract_id.hex(),
                "sig": signature.hex()}

    @classmethod
    def from_json(cls, d: dict) -> tuple["UserRegistration", bytes]:
        reg = cls(*(bytes.fromhex(d[k]) for k in ("owner", "master_key", "index_root",
                                                   "contract_id")))
        return reg, bytes.fromhex(d["sig"])


@dataclass(frozen=True)
class KeyRequest:
    requester: bytes
    items: tuple[Item, ...]
    sig: bytes = b""

    def body(self) -> bytes:
        return canonical({"requester": self.requester.hex(),
                          "items": [item_to_json(i) for i in self.items]}).encode()

    @classmethod
    def signed(cls, key: KeyPair, items: list[Item]) -> "KeyRequest":
        unsigned = cls(key.address, tuple(items))
        return cls(key.address, tuple(items), key.sign(unsigned.body()))

    def to_json(self) -> dict:
        return {"requester": self.requester.hex(),
                "items": [item_to_json(i) for i in self.items], "sig": self.sig.hex()}

    @classmethod
    def from_json(cls, d: dict) -> "KeyRequest":
        return cls(bytes.fromhex(d["requester"]), tuple(item_from_json(i) for i in d["items"]),
                   bytes.fromhex(d["sig"]))


@dataclass
class KeyResponse:
    """Per-item results in request order.

    A granted tx-address carries ``key``; a granted channel carries
    ``entry_root`` and ``keys`` (one per message at response time); a
    refused item carries ``denied``.
    """

    items: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"items": self.items}

    @classmethod
    def from_json(cls, d: dict) -> "KeyResponse":
        return cls(list(d["items"]))

    def key_for(self, address: bytes) -> bytes | None:
        for entry in self.items:
            if entry["ref"].get("tx") == address.hex() and "key" in entry:
                return bytes.fromhex(entry["key"])
        return None

    def channel_keys(self, root: bytes) -> dict[bytes, bytes]:
        """Message root -> key for a granted channel."""
        for entry in self.items:
            ref = entry["ref"].get("channel")
            if ref and ref["root"] == root.hex() and "keys" in entry:
                return {bytes.fromhex(k["root"]): bytes.fromhex(k["key"]) for k in entry["keys"]}
        return {}

    def denials(self) -> list[str]:
        return [e["denied"] for e in self.items if "denied" in e]


@dataclass
class _Owner:
    registration: UserRegistration


class AuthService:
    def __init__(self, tangle: Tangle, contracts: ContractState):
        self.tangle = tangle
        self.contracts = contracts
        self._owners: dict[bytes, _Owner] = {}
        self._lock = threading.Lock()

    def register_user(self, registration: UserRegistration, signature: bytes) -> None:
        with self.contracts.lock:
            try:
                pubkey = self.contracts.pubkeys[registration.owner]
            except KeyError:
                raise UnknownAccount(registration.owner.hex()) from None
            if not verify_signature(pubkey, registration.body(), signature):
                raise BadSignature("registration is not signed by its owner")
            c = self.contracts.contract(registration.contract_id)
            if c.owner != registration.owner:
                raise UnknownContract("contract is not owned by the registering user")
        with self._lock:
            self._owners[registration.owner] = _Owner(registration)

    def registrations(self) -> list[UserRegistration]:
        with self._lock:
            return [o.registration for o in self._owners.values()]

    # -- resolution --------------------------------------------------------

    def _channels(self, owner: _Owner) -> dict[bytes, list[tuple[bytes, bytes]]]:
        """Entry root -> [(address, root)] for the index and every registered channel."""
        reg = owner.registration
        out = {reg.index_root: [(m.address, m.root) for m in mam.walk_chain(self.tangle,
                                                                             reg.index_root)]}
        for ref in mam.channel_hierarchy(self.tangle, reg.index_root, reg.master_key):
            out[ref.root] = [(m.address, m.root) for m in mam.walk_chain(self.tangle, ref.root)]
        return out

    def resolve_channels(self, owner: bytes) -> list[ChannelRef]:
        reg = self._owners[owner].registration
        return mam.channel_hierarchy(self.tangle, reg.index_root, reg.master_key)

    def _locate(self, item: Item, views: dict[bytes, dict]) -> tuple[_Owner, bytes] | None:
        """Owner and entry root of the channel holding ``item``."""
        for owner in list(self._owners.values()):
            key = owner.registration.owner
            if key not in views:
                views[key] = self._channels(owner)
            chans = views[key]
            for entry, msgs in chans.items():
                if isinstance(item, ChannelRef):
                    if item.root == entry:
                        return owner, entry
                elif any(addr == item for addr, _ in msgs):
                    return owner, entry
        return None

    def handle_key_request(self, request: KeyRequest) -> KeyResponse:
        snapshot = self.contracts.snapshot()
        pubkey = snapshot.pubkeys.get(request.requester)
        if pubkey is None or not verify_signature(pubkey, request.body(), request.sig):
            raise BadSignature("key request signature does not verify")
        views: dict[bytes, dict] = {}
        response = KeyResponse()
        for item in request.items:
            ref = item_to_json(item)
            try:
                located = self._locate(item, views)
            except AuthFailure:
                located = None
            if located is None:
                response.items.append({"ref": ref, "denied": "UnknownItem"})
                continue
            owner, entry = located
            reg = owner.registration
            chans = views[reg.owner]

            def members(granted: ChannelRef) -> list[bytes]:
                return [a for a, _ in chans.get(granted.root, [])]

            try:
                allowed = snapshot.check_access(reg.contract_id, request.requester, item, members)
            except UnknownContract:
                allowed = False
            if not allowed:
                response.items.append({"ref": ref, "denied": "AccessDenied"})
            elif isinstance(item, ChannelRef):
                response.items.append({
                    "ref": ref, "entry_root": entry.hex(),
                    "keys": [{"root": root.hex(), "key": derive_key(reg.master_key, root).hex()}
                             for _, root in chans[entry]],
                })
            else:
                root = next(r for a, r in chans[entry] if a == item)
                response.items.append({"ref": ref, "root": root.hex(),
                                       "key": derive_key(reg.master_key, root).hex()})
        return response

    def handle_json(self, request: dict) -> dict:
        try:
            return self.handle_key_request(KeyRequest.from_json(request)).to_json()
        except BadSignature as exc:
            return {"error": "BadSignature", "detail": str(exc)}
        except (KeyError, ValueError, TypeError) as exc:
            return {"error": "BadRequest", "detail": str(exc)}


# -- wire protocol -----------------------------------------------------------

def send_frame(sock: socket.socket, obj: dict) -> None:
    data = json.dumps(obj, separators=(",", ":")).encode()
    sock.sendall(struct.pack(">I", len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> dict | None:
    try:
        header = _recv_exact(sock, 4)
    except ConnectionError:
        return None
    (n,) = struct.unpack(">I", header)
    return json.loads(_recv_exact(sock, n).decode())


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            req = recv_frame(self.request)
            if req is None:
                return
            send_frame(self.request, self.server.service.handle_json(req))


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


def serve(service: AuthService, host: str = "127.0.0.1", port: int = 0) -> _Server:
    """Bound server; call ``serve_forever`` (or run it in a thread)."""
    server = _Server((host, port), _Handler)
    server.service = service
    return server


def request_keys(host: str, port: int, request: KeyRequest, timeout: float = 10.0) -> KeyResponse:
    with socket.create_connection((host, port), timeout=timeout) as sock:
        send_frame(sock, request.to_json())
        reply = recv_frame(sock)
    if reply is None:
        raise ConnectionError("server closed the connection")
    if "error" in reply:
        if reply["error"] == "BadSignature":
            raise BadSignature(reply.get("detail", ""))
        raise ValueError(reply.get("detail", reply["error"]))
    return KeyResponse.from_json(reply)

