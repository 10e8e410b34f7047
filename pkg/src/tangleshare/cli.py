"""``tangleshare`` command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import simbench
from .authsvc import serve
from .crypto import sha256
from .errors import TangleShareError
from .ledger import NetworkConfig
from .payload import ChannelRef
from .pol import (
    PROOF_MAGIC,
    AreaCommitment,
    LocationCertificate,
    ZkPolProof,
    build_area,
    issue_certificate,
    prove_in_area,
    verify_certificate,
    verify_in_area,
)
from .workspace import DEFAULT_SUPPLY, Workspace

ENV_WORKSPACE = "TANGLESHARE_WORKSPACE"


def parse_position(text: str) -> tuple[int, int]:
    """``"44.49,11.34"`` in degrees -> microdegrees."""
    try:
        lat, lon = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LAT,LON in degrees, got {text!r}") from None
    return round(lat * 1e6), round(lon * 1e6)


def _hex(text: str) -> bytes:
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not hex: {text!r}") from None


class Output:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, obj, text: str | None = None) -> None:
        if self.as_json:
            print(json.dumps(obj, indent=2, sort_keys=True))
        else:
            print(text if text is not None else _plain(obj))


def _plain(obj) -> str:
    if isinstance(obj, dict):
        return "\n".join(f"{k}: {v}" for k, v in obj.items())
    return str(obj)


def _table(rows: list[list[str]], header: list[str]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*map(str, r)) for r in rows]
    return "\n".join(lines)


def _workspace(args) -> Workspace:
    return Workspace(args.workspace)


# -- commands ------------------------------------------------------------------

def cmd_init(args, out: Output) -> None:
    seed = None
    if args.seed is not None:
        seed = sha256(b"workspace-seed", args.seed.encode())
    cfg = NetworkConfig(difficulty=args.difficulty, payload_max=args.payload_max,
                        name=args.network_name)
    ws = Workspace.init(args.workspace, seed, cfg, args.supply, args.inline_max)
    out.emit({"workspace": str(ws.root), "difficulty": cfg.difficulty,
              "treasury": ws.treasury.address.hex()})


def cmd_user(args, out: Output) -> None:
    ws = _workspace(args)
    rec = ws.user_new(args.name, args.fund) if args.action == "new" else ws.user(args.name)
    info = {"name": rec.name, "address": rec.address.hex(), "contract_id": rec.contract_id.hex(),
            "index_root": rec.index_channel().entry_root.hex(),
            "balance": ws.contracts.balance(rec.address),
            "features": sorted(rec.features)}
    if args.reveal:
        info["master_key"] = rec.master_key.hex()
        info["signing_seed"] = rec.secret.hex()
    out.emit(info)


def cmd_publish(args, out: Output) -> None:
    ws = _workspace(args)
    if args.file or (os.path.isfile(args.data)):
        data = Path(args.file or args.data).read_bytes()
    else:
        data = args.data.encode()
    cert = Path(args.cert).read_bytes() if args.cert else None
    msgs = ws.publish(args.user, args.feature, data, cert)
    out.emit({"messages": msgs}, "\n".join(
        f"{m['kind']:<12} address {m['address']}  root {m['root']}  ({len(m['bundle'])} txs)"
        for m in msgs))


def cmd_session(args, out: Output) -> None:
    ws = _workspace(args)
    sess = ws.open_session(args.user)
    out.emit({"session_root": sess.entry_root.hex()})


def cmd_channels(args, out: Output) -> None:
    ws = _workspace(args)
    refs = ws.channels(args.user)
    rows = [[r.kind.name.lower(), r.feature_name or "", r.root.hex()] for r in refs]
    out.emit([r.to_json() for r in refs], _table(rows, ["kind", "feature", "root"]))


def cmd_market(args, out: Output) -> None:
    ws = _workspace(args)
    if args.action == "offer":
        items = [ws.resolve_item(args.owner, s) for s in args.items]
        bid = ws.offer(args.owner, items, args.price)
        out.emit({"bundle_id": bid})
    elif args.action == "list":
        c = ws.contracts.contract(ws.user(args.owner).contract_id)
        cat = c.to_json()["catalog"]
        rows = [[b["id"], b["price"], ", ".join(_item_label(i) for i in b["items"])] for b in cat]
        out.emit(cat, _table(rows, ["bundle", "price", "items"]))
    elif args.action == "buy":
        entry = ws.buy(args.buyer, args.owner, args.bundle_id)
        out.emit({"contract_id": entry.contract_id.hex(), "holder": entry.holder.hex(),
                  "bundle_id": entry.bundle_id,
                  "balance": ws.contracts.balance(entry.holder)})
    elif args.action == "acl":
        c = ws.contracts.contract(ws.user(args.owner).contract_id)
        rows = [[ws.name_of(a), ", ".join(map(str, sorted(b)))] for a, b in sorted(c.acl.items())]
        out.emit({ws.name_of(a): sorted(b) for a, b in c.acl.items()},
                 _table(rows, ["holder", "bundles"]))


def _item_label(d: dict) -> str:
    if "tx" in d:
        return f"tx:{d['tx'][:16]}"
    ch = d["channel"]
    return f"{ch['kind']}:{ch.get('feature') or ch['root'][:16]}"


def cmd_fetch(args, out: Output) -> None:
    ws = _workspace(args)
    item = ws.resolve_item(args.owner, args.item)
    results = ws.fetch(args.buyer, item, args.remote)
    if args.out:
        Path(args.out).write_bytes(b"".join(data for _, data in results))
    records = []
    for kind, data in results:
        rec = {"kind": kind, "size": len(data)}
        if kind == "certificate":
            cert = LocationCertificate.deserialize(data)
            rec.update({"ord_id": cert.ord_id, "valid": verify_certificate(ws.pki, cert)})
        elif kind == "tx_address":
            rec["data"] = data.hex()
        elif kind == "channel_ref":
            rec["data"] = json.dumps(ChannelRef.deserialize(data).to_json(), sort_keys=True)
        else:
            try:
                rec["data"] = data.decode()
            except UnicodeDecodeError:
                rec["data_hex"] = data.hex()
        records.append(rec)
    if out.as_json:
        out.emit(records)
    elif not args.out:
        for r in records:
            if "data" in r:
                print(r["data"])
            elif "data_hex" in r:
                sys.stdout.buffer.write(bytes.fromhex(r["data_hex"]))
                sys.stdout.flush()
            else:
                print(f"[certificate from {r['ord_id']}: {'valid' if r['valid'] else 'INVALID'}]")


def cmd_balances(args, out: Output) -> None:
    ws = _workspace(args)
    rows = [[ws.name_of(a), a.hex(), v] for a, v in sorted(ws.contracts.balances.items())]
    out.emit({r[0]: r[2] for r in rows} | {"_escrow": ws.contracts.escrowed()},
             _table(rows + [["(escrow)", "", ws.contracts.escrowed()]],
                    ["account", "address", "balance"]))


def cmd_state(args, out: Output) -> None:
    ws = _workspace(args)
    out.emit({"state_hash": ws.state_hash(), "contracts": ws.contracts.state_hash().hex(),
              "transactions": len(ws.tangle), "clock": ws.clock})


def cmd_pol(args, out: Output) -> None:
    ws = _workspace(args)
    if args.action == "register-ord":
        key = ws.register_ord(args.ord)
        out.emit({"ord_id": args.ord, "public_key": key.public_key.hex()})
    elif args.action == "issue":
        ts = args.timestamp if args.timestamp is not None else ws.clock
        cert = issue_certificate(ws.pki, args.ord, ws.ord_key(args.ord), args.position,
                                 args.range, ws.address_of(args.prover), ts)
        Path(args.out).write_bytes(cert.serialize())
        out.emit({"certificate": args.out, "ord_id": cert.ord_id, "timestamp": ts})
    elif args.action == "area":
        salt = args.salt or ws.derive("epoch-salt", str(ws.clock))[:16]
        area = build_area(args.center, args.radius, args.cell, salt)
        Path(args.out).write_text(json.dumps(area.to_json(), indent=2, sort_keys=True) + "\n")
        out.emit({"area": args.out, "cells": area.size, "merkle_root": area.merkle_root.hex()})
    elif args.action == "prove":
        area = AreaCommitment.from_json(json.loads(Path(args.area).read_text()))
        nonce = ws.derive("pol-nonce", str(args.position), area.merkle_root.hex())
        proof = prove_in_area(args.position, area, nonce)
        Path(args.out).write_bytes(proof.serialize())
        out.emit({"proof": args.out, "path_length": len(proof.merkle_path)})
    elif args.action == "verify":
        data = Path(args.file).read_bytes()
        if data.startswith(PROOF_MAGIC):
            if not args.area:
                raise argparse.ArgumentTypeError("verifying an area proof needs --area")
            area = AreaCommitment.from_json(json.loads(Path(args.area).read_text()))
            proof = ZkPolProof.deserialize(data)
            ok = verify_in_area(proof, area)
            out.emit({"kind": "area-proof", "valid": ok,
                      "cell": list(proof.cell_id) if ok else None})
        else:
            cert = LocationCertificate.deserialize(data)
            ok = verify_certificate(ws.pki, cert)
            out.emit({"kind": "certificate", "valid": ok, "ord_id": cert.ord_id})
        if not ok:
            raise TangleShareError("verification failed")


def cmd_paychan(args, out: Output) -> None:
    ws = _workspace(args)
    if args.action == "open":
        ch = ws.open_paychan(args.payer, args.payee, args.deposit)
        out.emit({"channel_id": ch.channel_id.hex(), "deposit": ch.deposit})
        return
    cid = args.channel_id
    if args.action == "pay":
        for _ in range(args.times):
            proof = ws.pay(cid, args.amount)
        out.emit({"cumulative": proof.cumulative, "seq": proof.seq})
        return
    if args.action == "close":
        ch = ws.close_paychan(cid, args.by, args.proof_seq, args.now)
    else:
        ch = ws.settle_paychan(cid, args.now)
    info = ch.to_json()
    info["payer_balance"] = ws.contracts.balance(ch.payer)
    info["payee_balance"] = ws.contracts.balance(ch.payee)
    out.emit(info)


def cmd_authsvc(args, out: Output) -> None:
    ws = _workspace(args)
    server = serve(ws.service, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_bench(args, out: Output) -> None:
    cal = simbench.Calibration.load(args.calibration)
    if args.source == "preset":
        scenarios = cal.preset(args.target, args.seed)
    else:
        scenarios = simbench.load_scenarios(args.target, cal, args.seed)
    if len(scenarios) == 1:
        results = [simbench.run_one(scenarios[0], args.bin_ms)]
    else:
        results = simbench.compare_scenarios(scenarios, args.bin_ms)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for i, res in enumerate(results):
        stem = res.name or f"scenario{i}"
        (outdir / f"{stem}.records.csv").write_text(simbench.records_csv(res.records))
        (outdir / f"{stem}.hist.csv").write_text(simbench.histogram_csv(res.histogram))
    out.emit({r.name: r.summary.to_json() for r in results}, simbench.summary_table(results))


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tangleshare", description=__doc__.splitlines()[0])
    p.add_argument("-w", "--workspace", default=os.environ.get(ENV_WORKSPACE, ".tangleshare"),
                   help=f"workspace directory (env {ENV_WORKSPACE})")
    p.add_argument("--json", action="store_true", help="structured output")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="create a workspace")
    s.add_argument("--seed", help="derive every secret from this string (reproducible runs)")
    s.add_argument("--difficulty", type=int, default=8)
    s.add_argument("--payload-max", type=int, default=1024)
    s.add_argument("--network-name", default="desk")
    s.add_argument("--supply", type=int, default=DEFAULT_SUPPLY)
    s.add_argument("--inline-max", type=int, default=256)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("user", help="create or show a user")
    s.add_argument("action", choices=["new", "show"])
    s.add_argument("name", nargs="?")
    s.add_argument("--name", dest="name_opt")
    s.add_argument("--fund", type=int, default=100, help="tokens moved from the treasury")
    s.add_argument("--reveal", action="store_true", help="print key material")
    s.set_defaults(func=cmd_user)

    s = sub.add_parser("publish", help="publish a datum to a feature channel")
    s.add_argument("user")
    s.add_argument("feature")
    s.add_argument("data", help="literal datum, or a path to a file")
    s.add_argument("--file", help="read the datum from this file")
    s.add_argument("--cert", help="also publish this location certificate")
    s.set_defaults(func=cmd_publish)

    s = sub.add_parser("session", help="open a new session channel")
    s.add_argument("action", choices=["open"])
    s.add_argument("user")
    s.set_defaults(func=cmd_session)

    s = sub.add_parser("channels", help="list a user's channels from the index")
    s.add_argument("user")
    s.set_defaults(func=cmd_channels)

    s = sub.add_parser("market", help="feature-contract catalog and purchases")
    msub = s.add_subparsers(dest="action", required=True)
    m = msub.add_parser("offer")
    m.add_argument("owner")
    m.add_argument("items", nargs="+",
                   help="tx address hex, feature:<name|root>, or session:<n|root>")
    m.add_argument("--price", type=int, required=True)
    m = msub.add_parser("list")
    m.add_argument("owner")
    m = msub.add_parser("buy")
    m.add_argument("buyer")
    m.add_argument("owner")
    m.add_argument("bundle_id", type=int)
    m = msub.add_parser("acl")
    m.add_argument("owner")
    s.set_defaults(func=cmd_market)

    s = sub.add_parser("fetch", help="obtain keys and decrypt an item")
    s.add_argument("buyer")
    s.add_argument("item", help="tx address hex, feature:<name|root>, or session:<n|root>")
    s.add_argument("--owner", help="owner for name-based items")
    s.add_argument("--remote", help="HOST:PORT of a running key service")
    s.add_argument("--out", help="write decrypted bytes here")
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("balances", help="token balances")
    s.set_defaults(func=cmd_balances)

    s = sub.add_parser("state", help="workspace state hash")
    s.set_defaults(func=cmd_state)

    s = sub.add_parser("pol", help="proof-of-location workflows")
    psub = s.add_subparsers(dest="action", required=True)
    m = psub.add_parser("register-ord")
    m.add_argument("--ord", required=True)
    m = psub.add_parser("issue")
    m.add_argument("--ord", required=True)
    m.add_argument("--position", type=parse_position, required=True)
    m.add_argument("--range", type=int, default=50)
    m.add_argument("--prover", required=True)
    m.add_argument("--timestamp", type=int)
    m.add_argument("--out", required=True)
    m = psub.add_parser("area")
    m.add_argument("--center", type=parse_position, required=True)
    m.add_argument("--radius", type=float, required=True)
    m.add_argument("--cell", type=float, default=100)
    m.add_argument("--salt", type=_hex)
    m.add_argument("--out", required=True)
    m = psub.add_parser("prove")
    m.add_argument("--position", type=parse_position, required=True)
    m.add_argument("--area", required=True)
    m.add_argument("--out", required=True)
    m = psub.add_parser("verify")
    m.add_argument("file")
    m.add_argument("--area")
    s.set_defaults(func=cmd_pol)

    s = sub.add_parser("paychan", help="off-chain micropayment channels")
    csub = s.add_subparsers(dest="action", required=True)
    m = csub.add_parser("open")
    m.add_argument("payer")
    m.add_argument("payee")
    m.add_argument("deposit", type=int)
    m = csub.add_parser("pay")
    m.add_argument("channel_id", type=_hex)
    m.add_argument("amount", type=int)
    m.add_argument("--times", type=int, default=1)
    m = csub.add_parser("close")
    m.add_argument("channel_id", type=_hex)
    m.add_argument("--by", choices=["payer", "payee"], required=True)
    m.add_argument("--proof-seq", type=int,
                   help="submit the proof with this seq (0: none; default: latest)")
    m.add_argument("--now", type=int)
    m = csub.add_parser("settle")
    m.add_argument("channel_id", type=_hex)
    m.add_argument("--now", type=int, required=True)
    s.set_defaults(func=cmd_paychan)

    s = sub.add_parser("authsvc", help="key-release service")
    asub = s.add_subparsers(dest="action", required=True)
    m = asub.add_parser("serve")
    m.add_argument("--host", default="127.0.0.1")
    m.add_argument("--port", type=int, default=7373)
    s.set_defaults(func=cmd_authsvc)

    s = sub.add_parser("bench", help="latency simulation")
    s.add_argument("source", choices=["preset", "file"])
    s.add_argument("target", help="preset name or scenario JSON path")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", default="bench-out")
    s.add_argument("--bin-ms", type=float, default=simbench.DEFAULT_BIN_MS)
    s.add_argument("--calibration", help="calibration JSON (default: shipped)")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "user":
        args.name = args.name or args.name_opt
        if not args.name:
            parser.error("user: a name is required")
    out = Output(args.json)
    try:
        args.func(args, out)
    except argparse.ArgumentTypeError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (TangleShareError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
