"""In-process DAG ledger: transactions approve two tips and carry a PoW nonce.

Difficulty counts trailing zero *bits* of the SHA-256 transaction hash,
interpreted as a big-endian integer.
"""
from __future__ import annotations

import hashlib
import random
import threading
from dataclasses import dataclass, field
from graphlib import TopologicalSorter

from .crypto import DIGEST_SIZE, ZERO_DIGEST, Reader, be32, be64, lp, sha256
from .errors import LedgerError, PayloadTooLarge

NONCE_SIZE = 8
MAX_DIFFICULTY = 32


@dataclass(frozen=True)
class NetworkConfig:
    difficulty: int = 8
    payload_max: int = 1024
    name: str = "desk"

    def __post_init__(self):
        if not 0 <= self.difficulty <= MAX_DIFFICULTY:
            raise ValueError(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
        if self.payload_max <= 0:
            raise ValueError("payload_max must be positive")


MAINNET = NetworkConfig(difficulty=14, name="mainnet")
DEVNET = NetworkConfig(difficulty=9, name="devnet")
DESK = NetworkConfig(difficulty=8, name="desk")


@dataclass(frozen=True)
class Transaction:
    hash: bytes
    trunk: bytes
    branch: bytes
    payload: bytes
    timestamp: int
    nonce: bytes
    bundle_hash: bytes
    bundle_index: int
    bundle_len: int

    def body(self) -> bytes:
        return serialize_body(self)

    def serialize(self) -> bytes:
        """Full wire form: the hash followed by the hashed body."""
        return self.hash + self.body()

    @classmethod
    def deserialize(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        h = r.take(DIGEST_SIZE)
        trunk = r.take(DIGEST_SIZE)
        branch = r.take(DIGEST_SIZE)
        payload = r.lp()
        timestamp = r.u64()
        bundle_hash = r.take(DIGEST_SIZE)
        bundle_index = r.u32()
        bundle_len = r.u32()
        nonce = r.take(NONCE_SIZE)
        r.finish()
        return cls(h, trunk, branch, payload, timestamp, nonce, bundle_hash,
                   bundle_index, bundle_len)


@dataclass(frozen=True)
class Draft:
    """A transaction before its nonce (and therefore its hash) is known."""

    trunk: bytes
    branch: bytes
    payload: bytes
    timestamp: int
    bundle_hash: bytes
    bundle_index: int = 0
    bundle_len: int = 1

    def prefix(self) -> bytes:
        return (self.trunk + self.branch + lp(self.payload) + be64(self.timestamp)
                + self.bundle_hash + be32(self.bundle_index) + be32(self.bundle_len))

    def seal(self, nonce: bytes) -> Transaction:
        h = sha256(self.prefix(), nonce)
        return Transaction(h, self.trunk, self.branch, self.payload, self.timestamp,
                           nonce, self.bundle_hash, self.bundle_index, self.bundle_len)


def serialize_body(tx: Transaction) -> bytes:
    # nonce last so the PoW search can reuse a hash state over the prefix
    return (tx.trunk + tx.branch + lp(tx.payload) + be64(tx.timestamp) + tx.bundle_hash
            + be32(tx.bundle_index) + be32(tx.bundle_len) + tx.nonce)


def trailing_zero_bits(digest: bytes) -> int:
    n = int.from_bytes(digest, "big")
    if n == 0:
        return len(digest) * 8
    return (n & -n).bit_length() - 1


def do_pow(draft: Draft, difficulty: int) -> tuple[bytes, int]:
    """Scan nonces 0, 1, 2, ... until the hash has ``difficulty`` trailing zero bits.

    Returns the winning nonce and the number of candidates tried.
    """
    if not 0 <= difficulty <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
    base = hashlib.sha256(draft.prefix())
    mask = (1 << difficulty) - 1
    n = 0
    while True:
        h = base.copy()
        nonce = be64(n)
        h.update(nonce)
        if int.from_bytes(h.digest(), "big") & mask == 0:
            return nonce, n + 1
        n += 1


def verify_pow(tx: Transaction, difficulty: int) -> bool:
    if sha256(serialize_body(tx)) != tx.hash:
        return False
    return trailing_zero_bits(tx.hash) >= difficulty


def make_genesis() -> Transaction:
    return Transaction(
        hash=sha256(serialize_body(Transaction(
            ZERO_DIGEST, ZERO_DIGEST, ZERO_DIGEST, bytes(DIGEST_SIZE), 0,
            bytes(NONCE_SIZE), ZERO_DIGEST, 0, 1))),
        trunk=ZERO_DIGEST, branch=ZERO_DIGEST, payload=bytes(DIGEST_SIZE), timestamp=0,
        nonce=bytes(NONCE_SIZE), bundle_hash=ZERO_DIGEST, bundle_index=0, bundle_len=1,
    )


GENESIS = make_genesis()


@dataclass
class Tangle:
    """Transaction store plus tip set.

    ``addresses`` is a side index from a 32-byte address to the bundles
    attached under it; the MAM layer uses it to locate messages.
    """

    transactions: dict[bytes, Transaction] = field(default_factory=dict)
    tips: set[bytes] = field(default_factory=set)
    genesis: bytes = GENESIS.hash
    bundles: dict[bytes, list[bytes]] = field(default_factory=dict)
    addresses: dict[bytes, list[bytes]] = field(default_factory=dict)
    order: list[bytes] = field(default_factory=list)
    clock: int = 0
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def __post_init__(self):
        if not self.transactions:
            self.transactions[GENESIS.hash] = GENESIS
            self.tips.add(GENESIS.hash)
            self.bundles[GENESIS.bundle_hash] = [GENESIS.hash]

    def __len__(self) -> int:
        return len(self.transactions)

    def __contains__(self, digest: bytes) -> bool:
        return digest in self.transactions

    def get(self, digest: bytes) -> Transaction:
        try:
            return self.transactions[digest]
        except KeyError:
            raise LedgerError(f"unknown transaction {digest.hex()}") from None

    def bundle(self, bundle_hash: bytes) -> list[Transaction]:
        return [self.transactions[h] for h in self.bundles.get(bundle_hash, [])]

    def find(self, address: bytes) -> list[list[Transaction]]:
        """All bundles attached under ``address``, oldest first."""
        with self.lock:
            return [self.bundle(b) for b in self.addresses.get(address, [])]

    def insert(self, bundle: list[Transaction], address: bytes | None = None,
               difficulty: int | None = None) -> None:
        """Add a solved bundle, checking references, PoW and shape."""
        with self.lock:
            new = {tx.hash for tx in bundle}
            for tx in bundle:
                if tx.hash in self.transactions:
                    raise LedgerError(f"duplicate transaction {tx.hash.hex()}")
                if difficulty is not None and not verify_pow(tx, difficulty):
                    raise LedgerError(f"invalid proof of work on {tx.hash.hex()}")
                for ref in (tx.trunk, tx.branch):
                    if ref == tx.hash:
                        raise LedgerError("self-approval")
                    if ref not in self.transactions and ref not in new:
                        raise LedgerError(f"unknown approvee {ref.hex()}")
                if not 0 <= tx.bundle_index < tx.bundle_len:
                    raise LedgerError("bundle_index out of range")
            for tx in bundle:
                self.transactions[tx.hash] = tx
                self.order.append(tx.hash)
                self.tips.discard(tx.trunk)
                self.tips.discard(tx.branch)
            approved = {r for tx in bundle for r in (tx.trunk, tx.branch)}
            self.tips.update(new - approved)
            bh = bundle[0].bundle_hash
            self.bundles.setdefault(bh, []).extend(
                tx.hash for tx in sorted(bundle, key=lambda t: t.bundle_index))
            if address is not None:
                self.addresses.setdefault(address, []).append(bh)
            self.clock = max(self.clock, max(tx.timestamp for tx in bundle))

    def topological_order(self) -> list[bytes]:
        """Approvees before approvers; raises ``graphlib.CycleError`` on a cycle."""
        graph = {
            h: {r for r in (tx.trunk, tx.branch) if r in self.transactions}
            for h, tx in self.transactions.items()
        }
        return list(TopologicalSorter(graph).static_order())

    # -- snapshots ---------------------------------------------------------

    def snapshot(self) -> list[dict]:
        """Bundles in attach order as JSON-ready records (genesis omitted)."""
        rev = {b: a for a, bs in self.addresses.items() for b in bs}
        seen: set[bytes] = set()
        out = []
        with self.lock:
            for h in self.order:
                bh = self.transactions[h].bundle_hash
                if bh in seen:
                    continue
                seen.add(bh)
                out.append({
                    "address": rev[bh].hex() if bh in rev else None,
                    "txs": [tx.serialize().hex() for tx in self.bundle(bh)],
                })
        return out

    @classmethod
    def from_snapshot(cls, records: list[dict], difficulty: int | None = None) -> "Tangle":
        t = cls()
        for rec in records:
            txs = [Transaction.deserialize(bytes.fromhex(x)) for x in rec["txs"]]
            addr = bytes.fromhex(rec["address"]) if rec.get("address") else None
            t.insert(txs, address=addr, difficulty=difficulty)
        return t


def select_tips(tangle: Tangle, rng_seed: int) -> tuple[bytes, bytes]:
    """Two tips drawn uniformly; they coincide only when a single tip exists."""
    with tangle.lock:
        tips = sorted(tangle.tips)
    rng = random.Random(rng_seed)
    if len(tips) == 1:
        return tips[0], tips[0]
    a, b = rng.sample(tips, 2)
    return a, b


def attach(tangle: Tangle, payloads: list[bytes], config: NetworkConfig, rng_seed: int,
           address: bytes | None = None, timestamp: int | None = None) -> list[Transaction]:
    """Solve and insert a bundle holding one transaction per payload.

    Transaction i approves transaction i+1 through its trunk; the last one
    approves the selected trunk tip. Every branch is the selected branch tip.
    """
    if not payloads:
        raise LedgerError("payloads must be non-empty")
    for p in payloads:
        if len(p) > config.payload_max:
            raise PayloadTooLarge(f"payload of {len(p)} bytes exceeds {config.payload_max}")
    with tangle.lock:
        trunk_tip, branch_tip = select_tips(tangle, rng_seed)
        ts = tangle.clock + 1 if timestamp is None else timestamp
        bundle_hash = sha256(b"bundle", trunk_tip, branch_tip, be64(ts), be64(len(tangle)),
                             address or b"", *(sha256(p) for p in payloads))
        n = len(payloads)
        solved: list[Transaction] = [None] * n  # type: ignore[list-item]
        trunk = trunk_tip
        for i in reversed(range(n)):
            draft = Draft(trunk, branch_tip, payloads[i], ts, bundle_hash, i, n)
            nonce, _ = do_pow(draft, config.difficulty)
            solved[i] = draft.seal(nonce)
            trunk = solved[i].hash
        tangle.insert(solved, address=address)
        return solved


__all__ = [
    "NetworkConfig", "MAINNET", "DEVNET", "DESK", "Transaction", "Draft", "Tangle",
    "GENESIS", "select_tips", "do_pow", "verify_pow", "attach", "trailing_zero_bits",
    "serialize_body",
]
