"""On-disk workspace tying every module together for the CLI.

Layout under the workspace root::

    workspace.json      network config, workspace seed, logical clock
    keys/<user>.json    signing seed, master key, channel cursors, contract id
    ords/<id>.json      on-road device signing seeds
    tangle.jsonl        one solved bundle per line, in attach order
    objects/<hex>       content-addressed store
    contracts.log       contract operation log (replayed on load)
    pki.json            device id -> public key
    registrations.json  signed key-service registrations
    paychans/<id>.json  off-chain balance proofs per payment channel

Every secret is derived from the workspace seed, so re-running the same
command script in a fresh workspace with the same seed ends in the same
state, byte for byte.
"""
from __future__ import annotations

import json
import os
import secrets
from dataclasses import dataclass, field
from pathlib import Path

from . import mam
from .authsvc import AuthService, KeyRequest, KeyResponse, UserRegistration, request_keys
from .contracts import (
    DEFAULT_CHALLENGE_PERIOD,
    BalanceProof,
    ContractState,
    Item,
    PaymentChannel,
    make_micropayment,
)
from .crypto import KeyPair, derive_key, sha256
from .errors import (
    AccessDenied,
    DuplicateRegistration,
    TangleShareError,
    UnknownAccount,
    UnknownItem,
)
from .ledger import NetworkConfig, Tangle
from .payload import ChannelKind, ChannelRef, Payload, PayloadKind
from .pol import LocationCertificate, PkiRegistry
from .store import DEFAULT_INLINE_MAX, ObjectStore, make_payload, open_payload

DEFAULT_SUPPLY = 1_000_000
TREASURY = "treasury"


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class UserRecord:
    name: str
    secret: bytes
    master_key: bytes
    index_seed: bytes
    index_count: int = 0
    features: dict[str, dict] = field(default_factory=dict)
    sessions: list[dict] = field(default_factory=list)
    contract_id: bytes = b""

    @property
    def key(self) -> KeyPair:
        return KeyPair(self.secret)

    @property
    def address(self) -> bytes:
        return self.key.address

    def index_channel(self) -> mam.ChannelState:
        return mam.ChannelState(self.index_seed, ChannelKind.INDEX, self.master_key,
                                index=self.index_count)

    def feature_channel(self, feature: str) -> mam.ChannelState | None:
        f = self.features.get(feature)
        if f is None:
            return None
        return mam.ChannelState(bytes.fromhex(f["seed"]), ChannelKind.FEATURE, self.master_key,
                                feature, f["index"])

    def to_json(self) -> dict:
        return {
            "name": self.name, "secret": self.secret.hex(), "master_key": self.master_key.hex(),
            "index_seed": self.index_seed.hex(), "index_count": self.index_count,
            "features": self.features, "sessions": self.sessions,
            "contract_id": self.contract_id.hex(), "address": self.address.hex(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "UserRecord":
        return cls(d["name"], bytes.fromhex(d["secret"]), bytes.fromhex(d["master_key"]),
                   bytes.fromhex(d["index_seed"]), d["index_count"], d["features"],
                   d["sessions"], bytes.fromhex(d["contract_id"]))


class Workspace:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        meta_path = self.root / "workspace.json"
        if not meta_path.exists():
            raise TangleShareError(f"no workspace at {self.root}; run `init` first")
        self.meta = json.loads(meta_path.read_text())
        self.seed = bytes.fromhex(self.meta["seed"])
        self.config = NetworkConfig(**self.meta["network"])
        self.inline_max = self.meta.get("inline_max", DEFAULT_INLINE_MAX)
        self.challenge_period = self.meta.get("challenge_period", DEFAULT_CHALLENGE_PERIOD)

        tangle_path = self.root / "tangle.jsonl"
        records = [json.loads(line) for line in tangle_path.read_text().splitlines() if line] \
            if tangle_path.exists() else []
        self.tangle = Tangle.from_snapshot(records, difficulty=self.config.difficulty)
        self.store = ObjectStore(self.root)
        log_path = self.root / "contracts.log"
        self.contracts = ContractState.replay(log_path.read_text().splitlines())
        self.pki = PkiRegistry.load(self.root / "pki.json")
        self.service = AuthService(self.tangle, self.contracts)
        reg_path = self.root / "registrations.json"
        self.registrations: list[dict] = (json.loads(reg_path.read_text())
                                          if reg_path.exists() else [])
        for d in self.registrations:
            reg, sig = UserRegistration.from_json(d)
            self.service.register_user(reg, sig)

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def init(cls, root: str | os.PathLike, seed: bytes | None = None,
             config: NetworkConfig | None = None, supply: int = DEFAULT_SUPPLY,
             inline_max: int = DEFAULT_INLINE_MAX) -> "Workspace":
        root = Path(root)
        if (root / "workspace.json").exists():
            raise TangleShareError(f"workspace already exists at {root}")
        root.mkdir(parents=True, exist_ok=True)
        seed = seed if seed is not None else secrets.token_bytes(32)
        cfg = config or NetworkConfig()
        meta = {
            "seed": seed.hex(),
            "network": {"difficulty": cfg.difficulty, "payload_max": cfg.payload_max,
                        "name": cfg.name},
            "inline_max": inline_max,
            "challenge_period": DEFAULT_CHALLENGE_PERIOD,
            "clock": 0,
        }
        treasury = KeyPair(sha256(seed, b"treasury"))
        state = ContractState.with_genesis({treasury.address: supply})
        state.register_key(treasury.public_key)
        _dump(root / "workspace.json", meta)
        (root / "contracts.log").write_text("".join(line + "\n" for line in state.log))
        (root / "tangle.jsonl").write_text("")
        return cls(root)

    def save(self) -> None:
        _dump(self.root / "workspace.json", self.meta)
        (self.root / "tangle.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.tangle.snapshot()))
        (self.root / "contracts.log").write_text("".join(line + "\n" for line in self.contracts.log))
        self.pki.save(self.root / "pki.json")

    def tick(self) -> int:
        self.meta["clock"] = self.meta.get("clock", 0) + 1
        return self.meta["clock"]

    @property
    def clock(self) -> int:
        return self.meta.get("clock", 0)

    def derive(self, *labels: str) -> bytes:
        return sha256(self.seed, *(lbl.encode() + b"\x00" for lbl in labels))

    def state_hash(self) -> str:
        """Digest over every persisted workspace file."""
        parts = []
        for p in sorted(self.root.rglob("*")):
            if p.is_file():
                rel = p.relative_to(self.root).as_posix()
                parts.append(sha256(rel.encode(), b"\x00", p.read_bytes()))
        return sha256(*parts).hex()

    # -- accounts ------------------------------------------------------------

    @property
    def treasury(self) -> KeyPair:
        return KeyPair(sha256(self.seed, b"treasury"))

    def _user_path(self, name: str) -> Path:
        if not name or "/" in name or name.startswith(".") or name == TREASURY:
            raise ValueError(f"invalid user name {name!r}")
        return self.root / "keys" / f"{name}.json"

    def user(self, name: str) -> UserRecord:
        path = self._user_path(name)
        if not path.exists():
            raise UnknownAccount(f"no user named {name!r}")
        return UserRecord.from_json(json.loads(path.read_text()))

    def users(self) -> list[str]:
        d = self.root / "keys"
        return sorted(p.stem for p in d.glob("*.json")) if d.exists() else []

    def save_user(self, rec: UserRecord) -> None:
        _dump(self._user_path(rec.name), rec.to_json())

    def name_of(self, address: bytes) -> str:
        if address == self.treasury.address:
            return TREASURY
        for n in self.users():
            if self.user(n).address == address:
                return n
        return address.hex()

    def address_of(self, who: str) -> bytes:
        if who == TREASURY:
            return self.treasury.address
        return self.user(who).address

    def key_of(self, who: str) -> KeyPair:
        if who == TREASURY:
            return self.treasury
        return self.user(who).key

    def user_new(self, name: str, fund: int = 100) -> UserRecord:
        if self._user_path(name).exists():
            raise DuplicateRegistration(f"user {name!r} already exists")
        rec = UserRecord(name, self.derive("user", name, "sign"), self.derive("user", name, "master"),
                         self.derive("user", name, "index"))
        addr = self.contracts.register_key(rec.key.public_key)
        if fund:
            self.contracts.transfer(self.treasury.address, addr, fund)
        rec.contract_id = self.contracts.deploy_feature_contract(addr)
        reg = UserRegistration(addr, rec.master_key, rec.index_channel().entry_root,
                               rec.contract_id)
        sig = reg.sign(rec.key)
        self.service.register_user(reg, sig)
        self.registrations.append(reg.to_json(sig))
        _dump(self.root / "registrations.json", self.registrations)
        self.save_user(rec)
        self.tick()
        self.save()
        return rec

    # -- publishing ----------------------------------------------------------

    def _register(self, rec: UserRecord, ref: ChannelRef) -> None:
        index = rec.index_channel()
        mam.register_channel(index, self.tangle, ref, self.config)
        rec.index_count = index.index

    def publish(self, name: str, feature: str, data: bytes, cert: bytes | None = None
                ) -> list[dict]:
        rec = self.user(name)
        ch = rec.feature_channel(feature)
        if ch is None:
            ch = mam.create_channel(self.derive("user", name, "feature", feature),
                                    ChannelKind.FEATURE, rec.master_key, feature)
            self._register(rec, ch.ref())
            rec.features[feature] = {"seed": ch.seed.hex(), "index": 0}
        published = []
        payloads = [make_payload(data, self.inline_max, self.store,
                                 derive_key(rec.master_key, ch.current_root))]
        if cert is not None:
            LocationCertificate.deserialize(cert)
            payloads.append(Payload.certificate(cert))
        for p in payloads:
            msg, bundle = mam.publish(ch, self.tangle, p, self.config)
            published.append({"address": msg.address.hex(), "root": msg.root.hex(),
                              "kind": p.kind.name.lower(),
                              "bundle": [tx.hash.hex() for tx in bundle]})
            if rec.sessions and rec.sessions[-1].get("open", True):
                sess = rec.sessions[-1]
                s = mam.ChannelState(bytes.fromhex(sess["seed"]), ChannelKind.SESSION,
                                     rec.master_key, index=sess["index"])
                mam.record_in_session(s, self.tangle, msg.address, self.config)
                sess["index"] = s.index
        rec.features[feature]["index"] = ch.index
        self.save_user(rec)
        self.tick()
        self.save()
        return published

    def open_session(self, name: str) -> mam.ChannelState:
        rec = self.user(name)
        index = rec.index_channel()
        seed = self.derive("user", name, "session", str(len(rec.sessions)))
        sess = mam.open_session(index, self.tangle, self.config, seed=seed)
        rec.index_count = index.index
        for s in rec.sessions:
            s["open"] = False
        rec.sessions.append({"seed": seed.hex(), "index": 0, "open": True})
        self.save_user(rec)
        self.tick()
        self.save()
        return sess

    def channels(self, name: str) -> list[ChannelRef]:
        rec = self.user(name)
        return mam.channel_hierarchy(self.tangle, rec.index_channel().entry_root, rec.master_key)

    def resolve_item(self, owner: str | None, spec: str) -> Item:
        """Parse ``<hex address>``, ``feature:<name|hex root>`` or ``session:<n|hex root>``."""
        if ":" not in spec:
            return bytes.fromhex(spec)
        kind, _, value = spec.partition(":")
        kind = kind.lower()
        if kind in ("feature", "channel"):
            if len(value) == 64:
                return ChannelRef(ChannelKind.FEATURE, bytes.fromhex(value))
            if owner is None:
                raise ValueError("a feature name needs an owner")
            ch = self.user(owner).feature_channel(value)
            if ch is None:
                raise UnknownItem(f"{owner} has no feature channel {value!r}")
            return ChannelRef(ChannelKind.FEATURE, ch.entry_root, value)
        if kind == "session":
            if len(value) == 64:
                return ChannelRef(ChannelKind.SESSION, bytes.fromhex(value))
            if owner is None:
                raise ValueError("a session number needs an owner")
            seed = bytes.fromhex(self.user(owner).sessions[int(value)]["seed"])
            return ChannelRef(ChannelKind.SESSION, mam.root_at(seed, 0, ChannelKind.SESSION))
        raise ValueError(f"unknown item kind {kind!r}")

    # -- market --------------------------------------------------------------

    def offer(self, name: str, items: list[Item], price: int) -> int:
        rec = self.user(name)
        bid = self.contracts.add_bundle(rec.contract_id, rec.address, items, price)
        self.tick()
        self.save()
        return bid

    def buy(self, buyer: str, owner: str, bundle_id: int):
        b = self.user(buyer)
        entry = self.contracts.purchase_access(b.address, self.user(owner).contract_id, bundle_id)
        self.tick()
        self.save()
        return entry

    def request_keys(self, buyer: str, items: list[Item], remote: str | None = None) -> KeyResponse:
        req = KeyRequest.signed(self.user(buyer).key, items)
        if remote:
            host, _, port = remote.rpartition(":")
            return request_keys(host or "127.0.0.1", int(port), req)
        return self.service.handle_key_request(req)

    def fetch(self, buyer: str, item: Item, remote: str | None = None) -> list[tuple[str, bytes]]:
        """Decrypted ``(kind, data)`` pairs for one item; raises on denial."""
        resp = self.request_keys(buyer, [item], remote)
        entry = resp.items[0]
        label = (item.root if isinstance(item, ChannelRef) else item).hex()
        if "denied" in entry:
            if entry["denied"] == "UnknownItem":
                raise UnknownItem(f"item not found: {label}")
            raise AccessDenied(f"{buyer} may not read {label}")
        if isinstance(item, ChannelRef):
            keys = resp.channel_keys(item.root)
            pairs = mam.fetch_messages(self.tangle, item.root, keys.get)
            return [self._open(p, keys[m.root]) for m, p in pairs]
        key = bytes.fromhex(entry["key"])
        msg = mam.read_message(self.tangle, item)
        if msg is None:
            raise UnknownItem(item.hex())
        return [self._open(mam.decrypt_message(msg, key), key)]

    def _open(self, payload: Payload, key: bytes) -> tuple[str, bytes]:
        return payload.kind.name.lower(), open_payload(payload, self.store, key)

    # -- devices -------------------------------------------------------------

    def ord_key(self, ord_id: str) -> KeyPair:
        path = self.root / "ords" / f"{ord_id}.json"
        if not path.exists():
            raise TangleShareError(f"no local key for device {ord_id!r}")
        return KeyPair(bytes.fromhex(json.loads(path.read_text())["secret"]))

    def register_ord(self, ord_id: str) -> KeyPair:
        if "/" in ord_id or not ord_id:
            raise ValueError(f"invalid device id {ord_id!r}")
        key = KeyPair(self.derive("ord", ord_id))
        self.pki.register(ord_id, key.public_key)
        _dump(self.root / "ords" / f"{ord_id}.json", {"id": ord_id, "secret": key.secret.hex()})
        self.tick()
        self.save()
        return key

    # -- payment channels ----------------------------------------------------

    def _paychan_path(self, channel_id: bytes) -> Path:
        return self.root / "paychans" / f"{channel_id.hex()}.json"

    def proofs(self, channel_id: bytes) -> list[BalanceProof]:
        path = self._paychan_path(channel_id)
        if not path.exists():
            return []
        return [BalanceProof.from_json(p) for p in json.loads(path.read_text())["proofs"]]

    def open_paychan(self, payer: str, payee: str, deposit: int) -> PaymentChannel:
        ch = self.contracts.open_channel(self.address_of(payer), self.address_of(payee), deposit)
        _dump(self._paychan_path(ch.channel_id), {"proofs": []})
        self.tick()
        self.save()
        return ch

    def pay(self, channel_id: bytes, amount: int) -> BalanceProof:
        ch = self.contracts.channel(channel_id)
        proofs = self.proofs(channel_id)
        key = self.key_of(self.name_of(ch.payer))
        proof = make_micropayment(ch, key, amount, proofs[-1] if proofs else None)
        _dump(self._paychan_path(channel_id),
              {"proofs": [p.to_json() for p in [*proofs, proof]]})
        return proof

    def close_paychan(self, channel_id: bytes, by: str, proof_seq: int | None = None,
                      now: int | None = None) -> PaymentChannel:
        """Close, challenge or settle; ``proof_seq`` 0 submits no proof, None the latest."""
        ch = self.contracts.channel(channel_id)
        caller = ch.payer if by == "payer" else ch.payee
        proofs = self.proofs(channel_id)
        if proof_seq == 0 or not proofs:
            proof = None
        elif proof_seq is None:
            proof = proofs[-1]
        else:
            proof = next((p for p in proofs if p.seq == proof_seq), None)
            if proof is None:
                raise ValueError(f"no proof with seq {proof_seq}")
        t = self.clock if now is None else now
        out = self.contracts.close_channel(channel_id, caller, proof, t, self.challenge_period)
        self.tick()
        self.save()
        return out

    def settle_paychan(self, channel_id: bytes, now: int) -> PaymentChannel:
        ch = self.contracts.channel(channel_id)
        out = self.contracts.close_channel(channel_id, ch.payee, None, now, self.challenge_period)
        self.tick()
        self.save()
        return out

    def certificate_payloads(self, name: str, feature: str) -> list[LocationCertificate]:
        rec = self.user(name)
        ch = rec.feature_channel(feature)
        if ch is None:
            return []
        return [LocationCertificate.deserialize(p.body)
                for p in mam.fetch_stream(self.tangle, ch.entry_root, rec.master_key)
                if p.kind == PayloadKind.CERTIFICATE]
