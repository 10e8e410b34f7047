"""Acceptance suite. Each test prints exactly one PASS/FAIL line."""
import os
import random
import threading
import time

from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tangleshare import mam, simbench
from tangleshare.authsvc import derive_key, serve
from tangleshare.cli import main
from tangleshare.contracts import ChannelStatus, ContractState, make_micropayment
from tangleshare.crypto import KeyPair, sha256
from tangleshare.errors import (
    AccessDenied,
    ContractError,
    OutsideArea,
)
from tangleshare.ledger import GENESIS, Draft, NetworkConfig, Tangle, do_pow
from tangleshare.payload import ChannelKind, Payload
from tangleshare.pol import (
    ZkPolProof,
    build_area,
    cell_bytes,
    from_local,
    leaf_hash,
    prove_in_area,
    verify_in_area,
)
from tangleshare.workspace import Workspace


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_mam_bundle_shape(report):
    cfg = NetworkConfig(difficulty=2, payload_max=512)
    header = len(Payload.inline(b"").serialize())
    limit = mam.max_payload(cfg) - header
    tangle = Tangle()
    channel = mam.create_channel(b"\x01" * 32, ChannelKind.FEATURE, b"\x02" * 32, "speed")
    sizes = []

    @settings(max_examples=100, deadline=None, database=None)
    @given(st.integers(0, limit))
    def prop(size):
        before = len(tangle)
        _, bundle = mam.publish(channel, tangle, Payload.inline(os.urandom(size)), cfg)
        assert len(bundle) == 4
        assert len(tangle) - before == 4
        assert len({tx.bundle_hash for tx in bundle}) == 1
        sizes.append(size)

    with Timer() as t:
        prop()
    ok = len(sizes) >= 100 and t.elapsed < 5
    report("mam bundle shape", ok,
           f"{len(sizes)} payload sizes in [0, {limit}] all gave 4 transactions "
           f"({t.elapsed:.2f}s, limit 5s)")
    assert ok


def test_pow_scaling(report):
    means = {}
    with Timer() as t:
        for d in (6, 8, 10):
            drafts = [Draft(GENESIS.hash, GENESIS.hash, f"draft {d} {i}".encode(), 1,
                            sha256(b"scaling", bytes([d, i]))) for i in range(200)]
            means[d] = sum(do_pow(x, d)[1] for x in drafts) / len(drafts)
    ratios = [means[8] / means[6], means[10] / means[8]]
    ok = all(2.5 <= r <= 6.5 for r in ratios) and t.elapsed < 30
    report("pow scaling", ok,
           f"mean attempts {means[6]:.0f}/{means[8]:.0f}/{means[10]:.0f} at d=6/8/10, "
           f"ratios {ratios[0]:.2f} and {ratios[1]:.2f} (bounds [2.5, 6.5]; "
           f"{t.elapsed:.1f}s, limit 30s)")
    assert ok


def test_key_derivation_vector(report):
    rng = random.Random(2024)
    with Timer() as t:
        zero_ok = derive_key(bytes(32), bytes(32)) == oracles.SHA256_64_ZEROS
        vectors = [(rng.randbytes(32), rng.randbytes(32)) for _ in range(10)]
        random_ok = all(derive_key(m, r) == oracles.sha256(m + r) for m, r in vectors)
    ok = zero_ok and random_ok and t.elapsed < 1
    report("key derivation vector", ok,
           f"zero vector {'matches' if zero_ok else 'differs'}, "
           f"10 random vectors {'match' if random_ok else 'differ'} ({t.elapsed * 1000:.0f}ms)")
    assert ok


def test_simulated_latency_reproduction(report):
    cal = simbench.Calibration.load()
    with Timer() as t:
        m = {}
        for preset in ("provider-comparison", "devnet-au-pc", "mainnet-au-pc"):
            for res in simbench.compare_scenarios(cal.preset(preset, 7)):
                m[res.name] = res.summary.mean_ms
    spread = abs(m["au-mainnet"] - m["pc-mainnet"]) / m["pc-mainnet"]
    checks = {
        "provider2-mainnet in [7, 11] s": 7_000 <= m["provider2-mainnet"] <= 11_000,
        "provider1-mainnet > 30 s": m["provider1-mainnet"] > 30_000,
        "pc-devnet in [350, 550] ms": 350 <= m["pc-devnet"] <= 550,
        "au-devnet in [1050, 1600] ms": 1050 <= m["au-devnet"] <= 1600,
        "au/pc mainnet within 10%": spread < 0.10,
        "runtime < 10 s": t.elapsed < 10,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report("simulated latency reproduction", ok,
           f"provider2 {m['provider2-mainnet'] / 1000:.2f}s, "
           f"provider1 {m['provider1-mainnet'] / 1000:.2f}s, "
           f"pc-devnet {m['pc-devnet']:.0f}ms, au-devnet {m['au-devnet']:.0f}ms, "
           f"au/pc mainnet spread {100 * spread:.1f}%"
           + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


def test_rate_limit_first_rejection(report):
    cal = simbench.Calibration.load()
    sc = next(s for s in cal.preset("rate-limit", 7) if s.provider.name == "provider2")
    with Timer() as t:
        recs = simbench.run_scenario(sc)
    first = next((r.message_index for r in recs if not r.accepted), None)
    ok = first is not None and abs(first - 31) <= 3 and t.elapsed < 5
    report("rate-limit first rejection", ok,
           f"first rejected message {first} of {len(recs)} at {sc.send_rate} msg/s "
           f"(expected 31 +/- 3; {t.elapsed * 1000:.0f}ms)")
    assert ok


def test_end_to_end_pipeline(report, tmp_path):
    inline_datum = b"88.5 km/h"
    object_datum = os.urandom(4000)
    with Timer() as t:
        ws = Workspace.init(tmp_path, b"\x42" * 32, NetworkConfig(difficulty=8))
        ws.user_new("alice")
        ws.user_new("bob")
        ws.publish("alice", "speed", inline_datum)
        ws.publish("alice", "trace", object_datum)
        items = [ws.resolve_item("alice", "feature:speed"),
                 ws.resolve_item("alice", "feature:trace")]
        server = serve(ws.service, "127.0.0.1", 0)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        remote = "%s:%d" % server.server_address[:2]
        try:
            denied = []
            for item in items:
                try:
                    ws.fetch("bob", item, remote)
                except AccessDenied:
                    denied.append(item)
            bundle_id = ws.offer("alice", items, 25)
            ws.buy("bob", "alice", bundle_id)
            got = [ws.fetch("bob", item, remote) for item in items]
        finally:
            server.shutdown()
            server.server_close()
    kinds = [g[0][0] for g in got]
    plain = [g[0][1] for g in got]
    ok = (len(denied) == 2 and plain == [inline_datum, object_datum]
          and kinds == ["inline", "object_ref"] and t.elapsed < 10)
    report("end-to-end data sharing", ok,
           f"pre-purchase denials {len(denied)}/2, payload kinds {kinds}, "
           f"plaintexts {'identical' if plain == [inline_datum, object_datum] else 'DIFFER'} "
           f"({t.elapsed:.2f}s, limit 10s)")
    assert ok


def test_zk_pol_soundness_completeness(report):
    center = (44_494_000, 11_342_000)
    radius, cell = 500, 100
    rng = random.Random(99)
    inside_cells = oracles.cells_within(radius, cell)
    with Timer() as t:
        area = build_area(center, radius, cell, b"\x33" * 16)
        inside, outside = [], []
        while len(inside) < 200 or len(outside) < 200:
            p = from_local(rng.uniform(-800, 800), rng.uniform(-800, 800), center)
            bucket = inside if oracles.grid_cell(p, center, cell) in inside_cells else outside
            if len(bucket) < 200:
                bucket.append(p)
        complete = sum(verify_in_area(prove_in_area(p, area), area) for p in inside)
        refused = 0
        for p in outside:
            try:
                prove_in_area(p, area)
            except OutsideArea:
                refused += 1

        small = build_area(center, 1200, 100, b"\x34" * 16)
        depth = len(prove_in_area(center, small).merkle_path)
        siblings = [s for s, _ in prove_in_area(center, small).merkle_path]
        small_cells = oracles.cells_within(1200, 100)
        ring = [(i, j) for i in range(-15, 16) for j in range(-15, 16)
                if (i, j) not in small_cells]
        forged = 0
        for c in ring:
            leaf = leaf_hash(c, small.epoch_salt)
            commitment = oracles.sha256(cell_bytes(c) + bytes(32))
            for bits in range(1 << depth):
                path = tuple((s, bool(bits >> k & 1)) for k, s in enumerate(siblings))
                if verify_in_area(ZkPolProof(commitment, leaf, path, c, bytes(32)), small):
                    forged += 1
    ok = (complete == 200 and refused == 200 and forged == 0 and small.size <= 1024
          and depth <= 10 and t.elapsed < 60)
    report("zk-pol soundness and completeness", ok,
           f"{complete}/200 in-area proofs verify, {refused}/200 out-of-area refused, "
           f"{forged} forgeries over {len(ring)} outside cells x {1 << depth} paths "
           f"on a {small.size}-cell area ({t.elapsed:.1f}s, limit 60s)")
    assert ok


def test_payment_channel_fuzz(report):
    rng = random.Random(8)
    keys = [KeyPair(bytes([i]) * 32) for i in range(1, 4)]
    violations = []
    settled = 0
    with Timer() as t:
        for trial in range(1000):
            state = ContractState.with_genesis({k.address: 1000 for k in keys})
            for k in keys:
                state.register_key(k.public_key)
            payer, payee = rng.sample(keys, 2)
            ch = state.open_channel(payer.address, payee.address, rng.randint(1, 200))
            proofs = [None]
            clock = 0
            for _ in range(rng.randint(1, 25)):
                clock += rng.randint(1, 40)
                step = rng.choice(["pay", "pay", "close", "challenge", "settle", "stale"])
                try:
                    if step == "pay":
                        proofs.append(make_micropayment(ch, payer, rng.randint(1, 60),
                                                        proofs[-1]))
                    elif step == "close":
                        who = rng.choice([payer, payee])
                        state.close_channel(ch.channel_id, who.address, rng.choice(proofs),
                                            clock, 50)
                    elif step == "challenge":
                        state.close_channel(ch.channel_id, payee.address, proofs[-1], clock, 50)
                    elif step == "stale":
                        stale = proofs[1] if len(proofs) > 1 else None
                        state.close_channel(ch.channel_id, payer.address, stale, clock, 50)
                    else:
                        state.close_channel(ch.channel_id, rng.choice([payer, payee]).address,
                                            None, clock, 50)
                except (ContractError, ValueError):
                    pass
                ch = state.channel(ch.channel_id)
                max_signed = max((p.cumulative for p in proofs if p), default=0)
                if not state.conserved():
                    violations.append((trial, "conservation"))
                if ch.status == ChannelStatus.SETTLED and ch.paid > max_signed:
                    violations.append((trial, "overpaid"))
            settled += ch.status == ChannelStatus.SETTLED
    ok = not violations and t.elapsed < 30
    report("payment channel safety fuzz", ok,
           f"1000 sequences, {settled} settled, {len(violations)} violations "
           f"({t.elapsed:.1f}s, limit 30s)")
    assert ok


SCRIPT = [
    ["init", "--seed", "determinism", "--difficulty", "6"],
    ["user", "new", "alice"],
    ["user", "new", "bob"],
    ["publish", "alice", "speed", "88.5"],
    ["session", "open", "alice"],
    ["publish", "alice", "speed", "91.0"],
    ["pol", "register-ord", "--ord", "ord-1"],
    ["market", "offer", "alice", "feature:speed", "--price", "12"],
    ["market", "buy", "bob", "alice", "0"],
    ["paychan", "open", "bob", "alice", "30"],
]


def _workspace_run(root, capsys):
    outputs = []
    for argv in SCRIPT:
        assert main(["-w", str(root), "--json", *argv]) == 0
        outputs.append(capsys.readouterr().out.replace(str(root), "<workspace>"))
    files = {p.relative_to(root).as_posix(): p.read_bytes()
             for p in sorted(root.rglob("*")) if p.is_file()}
    return outputs, files


def test_determinism(report, tmp_path, capsys):
    cal = simbench.Calibration.load()
    scenario_mismatch = []
    for name in sorted(cal.presets):
        for sc in cal.preset(name, 7):
            a = simbench.records_csv(simbench.run_scenario(sc))
            b = simbench.records_csv(simbench.run_scenario(sc))
            if a != b:
                scenario_mismatch.append(sc.name)
    out_a, files_a = _workspace_run(tmp_path / "a", capsys)
    out_b, files_b = _workspace_run(tmp_path / "b", capsys)
    replayed = Workspace(tmp_path / "a")
    original = ContractState.replay((tmp_path / "a" / "contracts.log").read_text().splitlines())
    replay_ok = (replayed.contracts.state_hash() == original.state_hash()
                 and replayed.tangle.snapshot() == Workspace(tmp_path / "b").tangle.snapshot())
    ok = (not scenario_mismatch and out_a == out_b and files_a == files_b and replay_ok)
    n_scen = sum(len(v) for v in cal.presets.values())
    report("determinism", ok,
           f"{n_scen - len(scenario_mismatch)}/{n_scen} seeded scenarios byte-identical, "
           f"workspace files {'identical' if files_a == files_b else 'DIFFER'} "
           f"({len(files_a)} files), CLI output {'identical' if out_a == out_b else 'DIFFERS'}, "
           f"replay {'consistent' if replay_ok else 'INCONSISTENT'}")
    assert ok
