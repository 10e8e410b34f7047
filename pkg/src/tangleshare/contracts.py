"""Deterministic smart-contract emulation.

:class:`ContractState` is a single-writer state machine holding the token
ledger, the per-user feature contracts (catalog + ACL) and the escrow side of
unidirectional payment channels. Every mutation goes through
:meth:`ContractState.apply`, which appends one canonical JSON line
``{"op", "args", "state"}`` to the operation log, so replaying the log from
an empty state reproduces the final state exactly.

Balance proofs are produced off-chain by :func:`make_micropayment` and only
reach the state machine when a channel is closed.
"""
from __future__ import annotations

import copy
import enum
import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Union

from .crypto import ADDRESS_SIZE, KeyPair, address_of, be64, sha256, verify_signature
from .errors import (
    AlreadyGranted,
    AlreadySettled,
    ChallengeExpired,
    ChallengeOpen,
    ContractError,
    DuplicateRegistration,
    ExceedsDeposit,
    InsufficientFunds,
    InvalidProof,
    NotAuthorized,
    UnknownAccount,
    UnknownBundle,
    UnknownChannel,
    UnknownContract,
)
from .payload import ChannelRef

DEFAULT_CHALLENGE_PERIOD = 100

Item = Union[bytes, ChannelRef]
ChannelMembers = Callable[[ChannelRef], Iterable[bytes]]


def item_to_json(item: Item) -> dict:
    if isinstance(item, ChannelRef):
        return {"channel": item.to_json()}
    return {"tx": item.hex()}


def item_from_json(d: dict) -> Item:
    if "channel" in d:
        return ChannelRef.from_json(d["channel"])
    return bytes.fromhex(d["tx"])


def _same_item(a: Item, b: Item) -> bool:
    if isinstance(a, ChannelRef) and isinstance(b, ChannelRef):
        return a.root == b.root
    return a == b


@dataclass(frozen=True)
class DataBundle:
    id: int
    items: tuple[Item, ...]
    price: int

    def to_json(self) -> dict:
        return {"id": self.id, "items": [item_to_json(i) for i in self.items],
                "price": self.price}


@dataclass
class FeatureContract:
    contract_id: bytes
    owner: bytes
    catalog: dict[int, DataBundle] = field(default_factory=dict)
    acl: dict[bytes, set[int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "contract_id": self.contract_id.hex(),
            "owner": self.owner.hex(),
            "catalog": [self.catalog[k].to_json() for k in sorted(self.catalog)],
            "acl": {a.hex(): sorted(b) for a, b in sorted(self.acl.items())},
        }


@dataclass(frozen=True)
class AclEntry:
    contract_id: bytes
    holder: bytes
    bundle_id: int


class ChannelStatus(str, enum.Enum):
    OPEN = "open"
    CLOSING = "closing"
    SETTLED = "settled"


@dataclass(frozen=True)
class BalanceProof:
    channel_id: bytes
    cumulative: int
    seq: int
    signature: bytes

    @staticmethod
    def message(channel_id: bytes, cumulative: int, seq: int) -> bytes:
        return channel_id + be64(cumulative) + be64(seq)

    def verify(self, payer_public_key: bytes) -> bool:
        return verify_signature(payer_public_key,
                                self.message(self.channel_id, self.cumulative, self.seq),
                                self.signature)

    def to_json(self) -> dict:
        return {"channel_id": self.channel_id.hex(), "cumulative": self.cumulative,
                "seq": self.seq, "signature": self.signature.hex()}

    @classmethod
    def from_json(cls, d: dict) -> "BalanceProof":
        return cls(bytes.fromhex(d["channel_id"]), d["cumulative"], d["seq"],
                   bytes.fromhex(d["signature"]))


@dataclass
class PaymentChannel:
    channel_id: bytes
    payer: bytes
    payee: bytes
    deposit: int
    status: ChannelStatus = ChannelStatus.OPEN
    deadline: int | None = None
    best_proof: BalanceProof | None = None
    paid: int | None = None

    def to_json(self) -> dict:
        return {
            "channel_id": self.channel_id.hex(), "payer": self.payer.hex(),
            "payee": self.payee.hex(), "deposit": self.deposit, "status": self.status.value,
            "deadline": self.deadline,
            "best_proof": self.best_proof.to_json() if self.best_proof else None,
            "paid": self.paid,
        }


def make_micropayment(channel: PaymentChannel, payer_key: KeyPair, amount: int,
                      previous: BalanceProof | None = None) -> BalanceProof:
    """Sign the next cumulative balance proof; touches no on-chain state."""
    if channel.status != ChannelStatus.OPEN:
        raise ContractError("channel is not open")
    if payer_key.address != channel.payer:
        raise NotAuthorized("only the payer can sign balance proofs")
    if amount <= 0:
        raise ValueError("amount must be positive")
    prior, seq = (previous.cumulative, previous.seq) if previous else (0, 0)
    cumulative = prior + amount
    if cumulative > channel.deposit:
        raise ExceedsDeposit(f"cumulative {cumulative} exceeds deposit {channel.deposit}")
    sig = payer_key.sign(BalanceProof.message(channel.channel_id, cumulative, seq + 1))
    return BalanceProof(channel.channel_id, cumulative, seq + 1, sig)


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class ContractState:
    def __init__(self):
        self.balances: dict[bytes, int] = {}
        self.total_supply = 0
        self.pubkeys: dict[bytes, bytes] = {}
        self.contracts: dict[bytes, FeatureContract] = {}
        self.owners: dict[bytes, bytes] = {}
        self.channels: dict[bytes, PaymentChannel] = {}
        self.registrations = 0
        self.channel_count = 0
        self.log: list[str] = []
        self.lock = threading.RLock()

    @classmethod
    def with_genesis(cls, allocation: dict[bytes, int]) -> "ContractState":
        state = cls()
        state.genesis(allocation)
        return state

    # -- snapshot / replay -------------------------------------------------

    def to_json(self) -> dict:
        return {
            "balances": {a.hex(): v for a, v in sorted(self.balances.items())},
            "total_supply": self.total_supply,
            "pubkeys": {a.hex(): k.hex() for a, k in sorted(self.pubkeys.items())},
            "contracts": [self.contracts[c].to_json() for c in sorted(self.contracts)],
            "channels": [self.channels[c].to_json() for c in sorted(self.channels)],
            "registrations": self.registrations,
            "channel_count": self.channel_count,
        }

    def state_hash(self) -> bytes:
        return sha256(canonical(self.to_json()).encode())

    def snapshot(self) -> "ContractState":
        """Independent copy for concurrent readers."""
        with self.lock:
            other = ContractState.__new__(ContractState)
            for k, v in self.__dict__.items():
                if k != "lock":
                    setattr(other, k, copy.deepcopy(v))
            other.lock = threading.RLock()
            return other

    @classmethod
    def replay(cls, lines: Iterable[str]) -> "ContractState":
        state = cls()
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            state.apply(rec["op"], rec["args"])
            if state.state_hash().hex() != rec["state"]:
                raise ContractError(f"replay diverged at op {len(state.log)} ({rec['op']})")
        return state

    def apply(self, op: str, args: dict):
        """Run one logged operation; failed operations leave no trace."""
        handler = getattr(self, f"_op_{op}", None)
        if handler is None:
            raise ContractError(f"unknown operation {op!r}")
        with self.lock:
            result = handler(**args)
            self.log.append(canonical({"op": op, "args": args,
                                       "state": self.state_hash().hex()}))
            return result

    # -- accounts and tokens -----------------------------------------------

    def genesis(self, allocation: dict[bytes, int]) -> None:
        self.apply("genesis", {"allocation": {a.hex(): v for a, v in sorted(allocation.items())}})

    def _op_genesis(self, allocation: dict[str, int]) -> None:
        if self.log:
            raise ContractError("genesis must be the first operation")
        for a, v in allocation.items():
            if v < 0:
                raise ValueError("negative allocation")
            self.balances[bytes.fromhex(a)] = v
        self.total_supply = sum(allocation.values())

    def register_key(self, public_key: bytes) -> bytes:
        return self.apply("register_key", {"public_key": public_key.hex()})

    def _op_register_key(self, public_key: str) -> bytes:
        pk = bytes.fromhex(public_key)
        addr = address_of(pk)
        self.pubkeys[addr] = pk
        self.balances.setdefault(addr, 0)
        return addr

    def balance(self, address: bytes) -> int:
        return self.balances.get(address, 0)

    def transfer(self, sender: bytes, recipient: bytes, amount: int) -> None:
        self.apply("transfer", {"sender": sender.hex(), "recipient": recipient.hex(),
                                "amount": amount})

    def _op_transfer(self, sender: str, recipient: str, amount: int) -> None:
        s, r = bytes.fromhex(sender), bytes.fromhex(recipient)
        self._require_account(s)
        self._require_account(r)
        if amount < 0:
            raise ValueError("amount must be non-negative")
        if self.balances[s] < amount:
            raise InsufficientFunds(f"balance {self.balances[s]} < {amount}")
        self.balances[s] -= amount
        self.balances[r] += amount

    def _require_account(self, address: bytes) -> None:
        if len(address) != ADDRESS_SIZE or address not in self.balances:
            raise UnknownAccount(address.hex())

    # -- feature contracts -------------------------------------------------

    def deploy_feature_contract(self, owner: bytes, catalog: Iterable[tuple[list[Item], int]] = ()
                                ) -> bytes:
        """Factory: every user gets the same contract code with their own catalog."""
        return self.apply("deploy_feature_contract", {
            "owner": owner.hex(),
            "catalog": [{"items": [item_to_json(i) for i in items], "price": price}
                        for items, price in catalog],
        })

    def _op_deploy_feature_contract(self, owner: str, catalog: list[dict]) -> bytes:
        o = bytes.fromhex(owner)
        self._require_account(o)
        if o in self.owners:
            raise DuplicateRegistration(f"{owner} already has a feature contract")
        bundles = [self._make_bundle(i, b["items"], b["price"]) for i, b in enumerate(catalog)]
        cid = sha256(o, be64(self.registrations))
        self.registrations += 1
        self.contracts[cid] = FeatureContract(cid, o, {b.id: b for b in bundles})
        self.owners[o] = cid
        return cid

    @staticmethod
    def _make_bundle(bundle_id: int, items: list[dict], price: int) -> DataBundle:
        if not items:
            raise ValueError("a data bundle needs at least one item")
        if price < 0:
            raise ValueError("price must be non-negative")
        return DataBundle(bundle_id, tuple(item_from_json(i) for i in items), price)

    def add_bundle(self, contract_id: bytes, caller: bytes, items: list[Item], price: int) -> int:
        return self.apply("add_bundle", {
            "contract_id": contract_id.hex(), "caller": caller.hex(),
            "items": [item_to_json(i) for i in items], "price": price,
        })

    def _op_add_bundle(self, contract_id: str, caller: str, items: list[dict], price: int) -> int:
        c = self.contract(bytes.fromhex(contract_id))
        if bytes.fromhex(caller) != c.owner:
            raise NotAuthorized("only the owner can extend the catalog")
        bundle = self._make_bundle(len(c.catalog), items, price)
        c.catalog[bundle.id] = bundle
        return bundle.id

    def contract(self, contract_id: bytes) -> FeatureContract:
        try:
            return self.contracts[contract_id]
        except KeyError:
            raise UnknownContract(contract_id.hex()) from None

    def contract_of(self, owner: bytes) -> FeatureContract:
        try:
            return self.contracts[self.owners[owner]]
        except KeyError:
            raise UnknownContract(f"no contract owned by {owner.hex()}") from None

    def purchase_access(self, buyer: bytes, contract_id: bytes, bundle_id: int) -> AclEntry:
        return self.apply("purchase_access", {"buyer": buyer.hex(),
                                              "contract_id": contract_id.hex(),
                                              "bundle_id": bundle_id})

    def _op_purchase_access(self, buyer: str, contract_id: str, bundle_id: int) -> AclEntry:
        b = bytes.fromhex(buyer)
        c = self.contract(bytes.fromhex(contract_id))
        self._require_account(b)
        if bundle_id not in c.catalog:
            raise UnknownBundle(f"bundle {bundle_id}")
        if bundle_id in c.acl.get(b, set()):
            raise AlreadyGranted(f"bundle {bundle_id} already granted")
        price = c.catalog[bundle_id].price
        if self.balances[b] < price:
            raise InsufficientFunds(f"balance {self.balances[b]} < price {price}")
        self.balances[b] -= price
        self.balances[c.owner] += price
        c.acl.setdefault(b, set()).add(bundle_id)
        return AclEntry(c.contract_id, b, bundle_id)

    def check_access(self, contract_id: bytes, who: bytes, item: Item,
                     members: ChannelMembers | None = None) -> bool:
        """Whether ``who`` may read ``item``.

        ``members`` lists the tx-addresses of a channel; it is needed to
        decide whether a channel grant covers a single transaction.
        """
        with self.lock:
            c = self.contract(contract_id)
            if who == c.owner:
                return True
            for bundle_id in sorted(c.acl.get(who, ())):
                for granted in c.catalog[bundle_id].items:
                    if _same_item(granted, item):
                        return True
                    if (members is not None and isinstance(granted, ChannelRef)
                            and isinstance(item, bytes) and item in set(members(granted))):
                        return True
            return False

    # -- payment channels --------------------------------------------------

    def open_channel(self, payer: bytes, payee: bytes, deposit: int) -> PaymentChannel:
        return self.apply("open_channel", {"payer": payer.hex(), "payee": payee.hex(),
                                           "deposit": deposit})

    def _op_open_channel(self, payer: str, payee: str, deposit: int) -> PaymentChannel:
        p, q = bytes.fromhex(payer), bytes.fromhex(payee)
        self._require_account(p)
        self._require_account(q)
        if p not in self.pubkeys:
            raise UnknownAccount(f"payer {payer} has no registered key")
        if deposit <= 0:
            raise InsufficientFunds("deposit must be positive")
        if self.balances[p] < deposit:
            raise InsufficientFunds(f"balance {self.balances[p]} < deposit {deposit}")
        cid = sha256(b"chan", p, q, be64(self.channel_count))
        self.channel_count += 1
        self.balances[p] -= deposit
        ch = PaymentChannel(cid, p, q, deposit)
        self.channels[cid] = ch
        return ch

    def channel(self, channel_id: bytes) -> PaymentChannel:
        try:
            return self.channels[channel_id]
        except KeyError:
            raise UnknownChannel(channel_id.hex()) from None

    def close_channel(self, channel_id: bytes, caller: bytes, proof: BalanceProof | None = None,
                      now: int = 0, challenge_period: int = DEFAULT_CHALLENGE_PERIOD
                      ) -> PaymentChannel:
        """Close or challenge a channel.

        A payee close with a proof settles at once. A payer close opens a
        challenge window until ``now + challenge_period``; inside it the
        payee may submit a higher-seq proof (which settles). After the
        deadline any party can settle on the best proof seen.
        """
        return self.apply("close_channel", {
            "channel_id": channel_id.hex(), "caller": caller.hex(),
            "proof": proof.to_json() if proof else None, "now": now,
            "challenge_period": challenge_period,
        })

    def _op_close_channel(self, channel_id: str, caller: str, proof: dict | None, now: int,
                          challenge_period: int) -> PaymentChannel:
        ch = self.channel(bytes.fromhex(channel_id))
        who = bytes.fromhex(caller)
        if ch.status == ChannelStatus.SETTLED:
            raise AlreadySettled(channel_id)
        if who not in (ch.payer, ch.payee):
            raise NotAuthorized("only channel participants can close")
        bp = BalanceProof.from_json(proof) if proof else None
        if bp is not None:
            if (bp.channel_id != ch.channel_id or bp.cumulative > ch.deposit or bp.seq < 1
                    or not bp.verify(self.pubkeys[ch.payer])):
                raise InvalidProof("balance proof does not verify for this channel")

        if ch.status == ChannelStatus.OPEN:
            if who == ch.payee:
                ch.best_proof = _best(ch.best_proof, bp)
                self._settle(ch)
            else:
                ch.status = ChannelStatus.CLOSING
                ch.deadline = now + challenge_period
                ch.best_proof = bp
            return ch

        # closing
        if now > ch.deadline:
            if bp is not None:
                raise ChallengeExpired(f"deadline {ch.deadline} passed")
            self._settle(ch)
        elif bp is not None:
            ch.best_proof = _best(ch.best_proof, bp)
            if who == ch.payee:
                self._settle(ch)
        else:
            raise ChallengeOpen(f"challenge window open until {ch.deadline}")
        return ch

    def _settle(self, ch: PaymentChannel) -> None:
        owed = ch.best_proof.cumulative if ch.best_proof else 0
        self.balances[ch.payee] += owed
        self.balances[ch.payer] += ch.deposit - owed
        ch.paid = owed
        ch.status = ChannelStatus.SETTLED

    def escrowed(self) -> int:
        return sum(c.deposit for c in self.channels.values() if c.status != ChannelStatus.SETTLED)

    def conserved(self) -> bool:
        return sum(self.balances.values()) + self.escrowed() == self.total_supply


def _best(a: BalanceProof | None, b: BalanceProof | None) -> BalanceProof | None:
    if a is None:
        return b
    if b is None:
        return a
    return b if b.seq > a.seq else a
