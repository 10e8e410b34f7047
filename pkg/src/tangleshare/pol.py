"""Proof of location.

Two mechanisms:

* PKI certificates: an on-road device (ORD) signs "prover was within
  ``range_m`` of me at ``timestamp``".
* Area membership proofs: the verifier commits to a service area as a
  salted Merkle set of grid cells; the prover shows that its cell is in the
  set without sending coordinates.

The membership proof is a grid-quantized Merkle-set construction, not a
zero-knowledge SNARK. Third parties observing ``(commitment, leaf, path)``
see only salted hashes; the designated verifier who receives the opening
learns the prover's cell, never its exact coordinates. Precision, and
therefore privacy, is set by ``cell_m``.

Positions are ``(lat, lon)`` in integer microdegrees. Distances use a local
equirectangular projection about the area center, which is accurate to well
under a metre over a few kilometres.
"""
from __future__ import annotations

import json
import math
import os
import secrets
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .crypto import (
    ADDRESS_SIZE,
    DIGEST_SIZE,
    KeyPair,
    Reader,
    be32,
    be64,
    lp,
    sbe64,
    sha256,
    verify_signature,
)
from .errors import AreaTooLarge, OutsideArea, UnknownDevice, UnregisteredDevice

EARTH_RADIUS_M = 6_371_008.8
METERS_PER_DEGREE = math.pi * EARTH_RADIUS_M / 180.0
MAX_CELLS = 1_000_000
CERT_MAGIC = b"CERT"
PROOF_MAGIC = b"ZPOL"

Position = tuple[int, int]
CellId = tuple[int, int]


# -- PKI certificates ----------------------------------------------------------

class PkiRegistry:
    """Append-only map from device id to Ed25519 public key."""

    def __init__(self, keys: dict[str, bytes] | None = None):
        self._keys: dict[str, bytes] = dict(keys or {})
        self._lock = threading.Lock()

    def register(self, ord_id: str, public_key: bytes) -> None:
        with self._lock:
            existing = self._keys.get(ord_id)
            if existing is not None and existing != public_key:
                raise ValueError(f"device {ord_id!r} is already registered with another key")
            self._keys[ord_id] = public_key

    def get(self, ord_id: str) -> bytes | None:
        return self._keys.get(ord_id)

    def __contains__(self, ord_id: str) -> bool:
        return ord_id in self._keys

    def to_json(self) -> dict[str, str]:
        return {k: v.hex() for k, v in sorted(self._keys.items())}

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PkiRegistry":
        p = Path(path)
        if not p.exists():
            return cls()
        return cls({k: bytes.fromhex(v) for k, v in json.loads(p.read_text()).items()})


@dataclass(frozen=True)
class LocationCertificate:
    ord_id: str
    ord_position: Position
    range_m: int
    timestamp: int
    prover: bytes
    signature: bytes = b""

    def body(self) -> bytes:
        lat, lon = self.ord_position
        return (CERT_MAGIC + lp(self.ord_id.encode()) + sbe64(lat) + sbe64(lon)
                + be32(self.range_m) + be64(self.timestamp) + self.prover)

    def serialize(self) -> bytes:
        return self.body() + lp(self.signature)

    @classmethod
    def deserialize(cls, data: bytes) -> "LocationCertificate":
        r = Reader(data)
        if r.take(len(CERT_MAGIC)) != CERT_MAGIC:
            raise ValueError("not a location certificate")
        ord_id = r.lp().decode()
        lat, lon = r.i64(), r.i64()
        range_m = r.u32()
        ts = r.u64()
        prover = r.take(ADDRESS_SIZE)
        sig = r.lp()
        r.finish()
        return cls(ord_id, (lat, lon), range_m, ts, prover, sig)


def issue_certificate(registry: PkiRegistry, ord_id: str, ord_key: KeyPair,
                      ord_position: Position, range_m: int, prover: bytes,
                      timestamp: int) -> LocationCertificate:
    if registry.get(ord_id) != ord_key.public_key:
        raise UnregisteredDevice(f"device {ord_id!r} is not registered with this key")
    unsigned = LocationCertificate(ord_id, tuple(ord_position), range_m, timestamp, prover)
    return LocationCertificate(ord_id, tuple(ord_position), range_m, timestamp, prover,
                               ord_key.sign(unsigned.body()))


def verify_certificate(registry: PkiRegistry, cert: LocationCertificate) -> bool:
    pk = registry.get(cert.ord_id)
    if pk is None:
        raise UnknownDevice(cert.ord_id)
    return verify_signature(pk, cert.body(), cert.signature)


# -- geometry ----------------------------------------------------------------

def to_local(position: Position, center: Position) -> tuple[float, float]:
    """Metres east/north of ``center``."""
    lat0 = center[0] / 1e6
    x = (position[1] - center[1]) / 1e6 * math.cos(math.radians(lat0)) * METERS_PER_DEGREE
    y = (position[0] - center[0]) / 1e6 * METERS_PER_DEGREE
    return x, y


def from_local(x: float, y: float, center: Position) -> Position:
    lat0 = center[0] / 1e6
    lat = center[0] + round(y / METERS_PER_DEGREE * 1e6)
    lon = center[1] + round(x / (METERS_PER_DEGREE * math.cos(math.radians(lat0))) * 1e6)
    return lat, lon


def cell_of(position: Position, center: Position, cell_m: float) -> CellId:
    """Grid cell index; cell (0, 0) is centered on the area center."""
    x, y = to_local(position, center)
    return math.floor(x / cell_m + 0.5), math.floor(y / cell_m + 0.5)


def cell_center_distance(cell: CellId, cell_m: float) -> float:
    return math.hypot(cell[0] * cell_m, cell[1] * cell_m)


def cell_bytes(cell: CellId) -> bytes:
    return struct.pack(">ii", *cell)


def leaf_hash(cell: CellId, epoch_salt: bytes) -> bytes:
    return sha256(cell_bytes(cell), epoch_salt)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(b"\x01", left, right)


def cells_in_radius(radius_m: float, cell_m: float) -> list[CellId]:
    k = math.ceil(radius_m / cell_m)
    if (2 * k + 1) ** 2 > 4 * MAX_CELLS:
        raise AreaTooLarge(f"radius {radius_m} m at cell {cell_m} m spans too many cells")
    cells = [(i, j) for i in range(-k, k + 1) for j in range(-k, k + 1)
             if cell_center_distance((i, j), cell_m) <= radius_m]
    if len(cells) > MAX_CELLS:
        raise AreaTooLarge(f"{len(cells)} cells exceed the limit of {MAX_CELLS}")
    return cells


# -- Merkle set ----------------------------------------------------------------

def merkle_levels(leaves: list[bytes]) -> list[list[bytes]]:
    """Bottom-up levels; an odd trailing node is promoted unchanged."""
    levels = [list(leaves)]
    while len(levels[-1]) > 1:
        cur = levels[-1]
        nxt = [node_hash(cur[i], cur[i + 1]) for i in range(0, len(cur) - 1, 2)]
        if len(cur) % 2:
            nxt.append(cur[-1])
        levels.append(nxt)
    return levels


def merkle_path(levels: list[list[bytes]], index: int) -> list[tuple[bytes, bool]]:
    """Siblings from leaf to root as ``(digest, sibling_is_left)``."""
    path = []
    for level in levels[:-1]:
        sib = index ^ 1
        if sib < len(level):
            path.append((level[sib], sib < index))
        index //= 2
    return path


def merkle_fold(leaf: bytes, path: list[tuple[bytes, bool]]) -> bytes:
    h = leaf
    for sib, sib_left in path:
        h = node_hash(sib, h) if sib_left else node_hash(h, sib)
    return h


@dataclass(frozen=True)
class AreaCommitment:
    center: Position
    radius_m: float
    cell_m: float
    epoch_salt: bytes
    merkle_root: bytes
    leaves: tuple[bytes, ...] = field(default=(), repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.leaves)

    def to_json(self) -> dict:
        return {"center": list(self.center), "radius_m": self.radius_m, "cell_m": self.cell_m,
                "epoch_salt": self.epoch_salt.hex(), "merkle_root": self.merkle_root.hex()}

    @classmethod
    def from_json(cls, d: dict) -> "AreaCommitment":
        area = build_area(tuple(d["center"]), d["radius_m"], d["cell_m"],
                          bytes.fromhex(d["epoch_salt"]))
        if area.merkle_root.hex() != d["merkle_root"]:
            raise ValueError("merkle_root does not match the public area parameters")
        return area


def build_area(center: Position, radius_m: float, cell_m: float = 100,
               epoch_salt: bytes | None = None) -> AreaCommitment:
    if radius_m <= 0 or cell_m <= 0:
        raise ValueError("radius_m and cell_m must be positive")
    salt = epoch_salt if epoch_salt is not None else secrets.token_bytes(16)
    if len(salt) != 16:
        raise ValueError("epoch_salt must be 16 bytes")
    leaves = sorted(leaf_hash(c, salt) for c in cells_in_radius(radius_m, cell_m))
    root = merkle_levels(leaves)[-1][0]
    return AreaCommitment(tuple(center), radius_m, cell_m, salt, root, tuple(leaves))


@dataclass(frozen=True)
class ZkPolProof:
    commitment: bytes
    leaf: bytes
    merkle_path: tuple[tuple[bytes, bool], ...]
    cell_id: CellId
    nonce: bytes

    def public_bytes(self) -> bytes:
        """What third parties see: everything except the opening."""
        out = PROOF_MAGIC + self.commitment + self.leaf + be32(len(self.merkle_path))
        for sib, sib_left in self.merkle_path:
            out += bytes([sib_left]) + sib
        return out

    def serialize(self) -> bytes:
        return self.public_bytes() + cell_bytes(self.cell_id) + self.nonce

    @classmethod
    def deserialize(cls, data: bytes) -> "ZkPolProof":
        r = Reader(data)
        if r.take(len(PROOF_MAGIC)) != PROOF_MAGIC:
            raise ValueError("not an area proof")
        commitment = r.take(DIGEST_SIZE)
        leaf = r.take(DIGEST_SIZE)
        path = []
        for _ in range(r.u32()):
            flag = r.u8()
            path.append((r.take(DIGEST_SIZE), bool(flag)))
        cell = struct.unpack(">ii", r.take(8))
        nonce = r.take(DIGEST_SIZE)
        r.finish()
        return cls(commitment, leaf, tuple(path), cell, nonce)


def prove_in_area(position: Position, area: AreaCommitment,
                  nonce: bytes | None = None) -> ZkPolProof:
    cell = cell_of(position, area.center, area.cell_m)
    if cell_center_distance(cell, area.cell_m) > area.radius_m:
        raise OutsideArea(f"cell {cell} is outside the committed area")
    leaf = leaf_hash(cell, area.epoch_salt)
    leaves = area.leaves or build_area(area.center, area.radius_m, area.cell_m,
                                       area.epoch_salt).leaves
    index = leaves.index(leaf)
    path = merkle_path(merkle_levels(list(leaves)), index)
    n = nonce if nonce is not None else secrets.token_bytes(DIGEST_SIZE)
    return ZkPolProof(sha256(cell_bytes(cell), n), leaf, tuple(path), cell, n)


def verify_in_area(proof: ZkPolProof, area: AreaCommitment) -> bool:
    if merkle_fold(proof.leaf, list(proof.merkle_path)) != area.merkle_root:
        return False
    if leaf_hash(proof.cell_id, area.epoch_salt) != proof.leaf:
        return False
    return sha256(cell_bytes(proof.cell_id), proof.nonce) == proof.commitment
