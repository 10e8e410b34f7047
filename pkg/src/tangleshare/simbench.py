"""Discrete-event simulation of MAM message attachment through full nodes.

A client builds a MAM bundle locally, asks a provider node for tips, lets the
node do the proof of work for every transaction in the bundle, and pays a
network round trip. Per accepted message::

    total = bundle_build + tip_selection + pow + network

PoW attempts per transaction are geometric with success probability
``2**-difficulty`` and are converted to time through the node's ``pow_rate``.
Each latency source draws from its own seeded stream using inverse-CDF
sampling, so two scenarios run with the same seed are paired: raising the
difficulty can only raise each message's PoW attempt count.

All time is a logical millisecond clock; nothing reads the wall clock.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, EmptyInput

ACCEPTED = "accepted"
CSV_HEADER = ["msg_index", "bundle_ms", "tips_ms", "pow_ms", "net_ms", "total_ms", "outcome"]
DEFAULT_BIN_MS = 500.0


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class Dist:
    """Latency distribution in milliseconds: lognormal(mu, sigma) or a constant."""

    kind: str = "constant"
    mu: float = 0.0
    sigma: float = 0.0
    value: float = 0.0

    @classmethod
    def from_json(cls, d: dict | float | int) -> "Dist":
        if isinstance(d, (int, float)):
            return cls("constant", value=float(d))
        kind = d.get("kind", "lognormal")
        if kind == "constant":
            return cls("constant", value=float(d["value"]))
        if kind != "lognormal":
            raise ConfigError(f"unknown distribution kind {kind!r}")
        if "mean_ms" in d:
            sigma = float(d["sigma"])
            return cls("lognormal", math.log(d["mean_ms"]) - sigma * sigma / 2, sigma)
        return cls("lognormal", float(d["mu"]), float(d["sigma"]))

    def sample(self, rng: np.random.Generator) -> float:
        z = rng.standard_normal()
        if self.kind == "constant":
            return self.value
        return math.exp(self.mu + self.sigma * z)

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.value
        return math.exp(self.mu + self.sigma ** 2 / 2)


@dataclass(frozen=True)
class RateLimit:
    max_mam_messages: int
    window_s: float
    blacklist: bool = True


@dataclass(frozen=True)
class NodeProfile:
    name: str
    tip_latency: Dist
    pow_rate: float
    rate_limit: RateLimit | None = None
    availability: float = 1.0
    retry_ms: float = 0.0
    max_retries: int = 5

    def __post_init__(self):
        if not self.pow_rate > 0:
            raise ConfigError("pow_rate must be positive")
        if not 0 < self.availability <= 1:
            raise ConfigError("availability must be in (0, 1]")

    @classmethod
    def from_json(cls, name: str, d: dict) -> "NodeProfile":
        rl = d.get("rate_limit")
        return cls(
            name=name,
            tip_latency=Dist.from_json(d["tip_latency"]),
            pow_rate=float(d["pow_rate"]),
            rate_limit=RateLimit(int(rl["max_mam_messages"]), float(rl["window_s"]),
                                 bool(rl.get("blacklist", True))) if rl else None,
            availability=float(d.get("availability", 1.0)),
            retry_ms=float(d.get("retry_ms", 0.0)),
            max_retries=int(d.get("max_retries", 5)),
        )


@dataclass(frozen=True)
class ClientProfile:
    name: str
    mam_overhead_ms: float
    network_rtt: Dist

    def __post_init__(self):
        if not self.mam_overhead_ms > 0:
            raise ConfigError("mam_overhead_ms must be positive")

    @classmethod
    def from_json(cls, name: str, d: dict) -> "ClientProfile":
        return cls(name, float(d["mam_overhead_ms"]), Dist.from_json(d["network_rtt"]))


@dataclass(frozen=True)
class Scenario:
    client: ClientProfile
    provider: NodeProfile
    difficulty: int
    n_messages: int = 100
    send_rate: float = 0.4
    rng_seed: int = 0
    name: str = ""
    network: str = ""
    tx_per_message: int = 4

    def __post_init__(self):
        if self.n_messages <= 0:
            raise ConfigError("n_messages must be positive")
        if self.send_rate <= 0:
            raise ConfigError("send_rate must be positive")
        if self.difficulty < 0:
            raise ConfigError("difficulty must be non-negative")


@dataclass
class Calibration:
    clients: dict[str, ClientProfile]
    providers: dict[str, NodeProfile]
    networks: dict[str, int]
    presets: dict[str, list[dict]]
    tx_per_message: int = 4

    @classmethod
    def from_json(cls, d: dict) -> "Calibration":
        return cls(
            clients={k: ClientProfile.from_json(k, v) for k, v in d["clients"].items()},
            providers={k: NodeProfile.from_json(k, v) for k, v in d["providers"].items()},
            networks={k: int(v["difficulty"]) for k, v in d["networks"].items()},
            presets=d.get("presets", {}),
            tx_per_message=int(d.get("tx_per_message", 4)),
        )

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Calibration":
        if path is None:
            text = resources.files("tangleshare").joinpath("calibration.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_json(json.loads(text))

    def scenario(self, d: dict, rng_seed: int | None = None) -> Scenario:
        """Build a scenario from its JSON form; names resolve against this calibration."""
        try:
            client = d["client"]
            client = (self.clients[client] if isinstance(client, str)
                      else ClientProfile.from_json(client.get("name", "custom"), client))
            provider = d["provider"]
            provider = (self.providers[provider] if isinstance(provider, str)
                        else NodeProfile.from_json(provider.get("name", "custom"), provider))
            network = d["network"]
            if isinstance(network, str):
                net_name, difficulty = network, self.networks[network]
            else:
                net_name, difficulty = network.get("name", "custom"), int(network["difficulty"])
        except KeyError as exc:
            raise ConfigError(f"unknown or missing scenario field: {exc}") from None
        seed = rng_seed if rng_seed is not None else int(d.get("rng_seed", 0))
        return Scenario(client, provider, difficulty, int(d.get("n_messages", 100)),
                        float(d.get("send_rate", 0.4)), seed, d.get("name", ""), net_name,
                        int(d.get("tx_per_message", self.tx_per_message)))

    def preset(self, name: str, rng_seed: int = 0) -> list[Scenario]:
        try:
            specs = self.presets[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; have {sorted(self.presets)}") from None
        return [self.scenario(s, rng_seed) for s in specs]


def load_scenarios(path: str | Path, calibration: Calibration | None = None,
                   rng_seed: int | None = None) -> list[Scenario]:
    """Read a scenario file: one scenario object or ``{"scenarios": [...]}``."""
    cal = calibration or Calibration.load()
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from None
    specs = d["scenarios"] if isinstance(d, dict) and "scenarios" in d else [d]
    return [cal.scenario(s, rng_seed) for s in specs]


# -- simulation ----------------------------------------------------------------

@dataclass(frozen=True)
class LatencyRecord:
    message_index: int
    bundle_ms: float
    tips_ms: float
    pow_ms: float
    net_ms: float
    total_ms: float
    outcome: str
    sent_at_ms: float = 0.0
    pow_attempts: int = 0

    @property
    def accepted(self) -> bool:
        return self.outcome == ACCEPTED

    def csv_row(self) -> list[str]:
        return [str(self.message_index), f"{self.bundle_ms:.3f}", f"{self.tips_ms:.3f}",
                f"{self.pow_ms:.3f}", f"{self.net_ms:.3f}", f"{self.total_ms:.3f}", self.outcome]


def geometric_attempts(u: float, difficulty: int) -> int:
    """Inverse-CDF draw of attempts until success at p = 2**-difficulty; u in (0, 1]."""
    if difficulty == 0:
        return 1
    p = 2.0 ** -difficulty
    return int(math.floor(math.log(u) / math.log1p(-p))) + 1


class _Streams:
    def __init__(self, seed: int):
        tips, pow_, net, avail = np.random.SeedSequence(seed).spawn(4)
        self.tips = np.random.default_rng(tips)
        self.pow = np.random.default_rng(pow_)
        self.net = np.random.default_rng(net)
        self.avail = np.random.default_rng(avail)


def run_scenario(scenario: Scenario) -> list[LatencyRecord]:
    """Sequential MAM publishes from one client through one provider.

    Message i becomes ready at ``i / send_rate`` seconds; the client keeps at
    most one request outstanding, so slow attachment queues later messages.
    A rate-limited provider rejects a request once it has served
    ``max_mam_messages`` within the window and, with ``blacklist``, every
    request after that. Rejected messages are not retried.
    """
    s = scenario
    node = s.provider
    rs = _Streams(s.rng_seed)
    records: list[LatencyRecord] = []
    served: deque[float] = deque()
    blacklisted = False
    backlog: deque[int] = deque()
    busy = False
    events: list[tuple[float, int, str, int]] = []
    seq = 0
    for i in range(1, s.n_messages + 1):
        heapq.heappush(events, ((i - 1) * 1000.0 / s.send_rate, seq, "ready", i))
        seq += 1

    def start(now: float, i: int) -> float:
        nonlocal blacklisted
        # every stream advances once per message so paired runs stay aligned
        tips = node.tip_latency.sample(rs.tips)
        attempts = sum(geometric_attempts(1.0 - rs.pow.random(), s.difficulty)
                       for _ in range(s.tx_per_message))
        net = s.client.network_rtt.sample(rs.net)
        bundle = s.client.mam_overhead_ms
        request_at = now + bundle

        outcome = ACCEPTED
        retries = 0
        while rs.avail.random() >= node.availability:
            retries += 1
            if retries > node.max_retries:
                outcome = "rejected:unavailable"
                break
        net += min(retries, node.max_retries) * node.retry_ms

        rl = node.rate_limit
        if outcome == ACCEPTED and rl is not None:
            while served and served[0] <= request_at - rl.window_s * 1000.0:
                served.popleft()
            if blacklisted or len(served) >= rl.max_mam_messages:
                outcome = "rejected:blacklisted" if blacklisted else "rejected:rate-limited"
                blacklisted = blacklisted or rl.blacklist
            else:
                served.append(request_at)

        if outcome == ACCEPTED:
            pow_ms = attempts * 1000.0 / node.pow_rate
            phases = (round(bundle, 3), round(tips, 3), round(pow_ms, 3), round(net, 3))
        else:
            phases = (round(bundle, 3), 0.0, 0.0, round(net, 3))
            attempts = 0
        total = round(sum(phases), 3)
        records.append(LatencyRecord(i, *phases, total, outcome, round(now, 3), attempts))
        return now + total

    while events:
        now, _, kind, i = heapq.heappop(events)
        if kind == "ready":
            backlog.append(i)
        else:
            busy = False
        if not busy and backlog:
            j = backlog.popleft()
            done = start(now, j)
            busy = True
            heapq.heappush(events, (done, seq, "done", j))
            seq += 1
    return records


# -- analysis ------------------------------------------------------------------

@dataclass(frozen=True)
class Summary:
    n: int
    n_accepted: int
    acceptance_rate: float
    mean_ms: float
    median_ms: float
    p95_ms: float
    phase_means: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def acceptance_rate(records: list[LatencyRecord]) -> float:
    if not records:
        raise EmptyInput("no records")
    return sum(r.accepted for r in records) / len(records)


def summarize(records: list[LatencyRecord]) -> Summary:
    """Latency statistics over accepted records; acceptance rate over all."""
    rate = acceptance_rate(records)
    ok = [r for r in records if r.accepted]
    if not ok:
        raise EmptyInput("no accepted records", acceptance_rate=rate)
    totals = np.array([r.total_ms for r in ok])
    phases = {
        "bundle_ms": float(np.mean([r.bundle_ms for r in ok])),
        "tips_ms": float(np.mean([r.tips_ms for r in ok])),
        "pow_ms": float(np.mean([r.pow_ms for r in ok])),
        "net_ms": float(np.mean([r.net_ms for r in ok])),
    }
    return Summary(len(records), len(ok), rate, float(totals.mean()), float(np.median(totals)),
                   float(np.percentile(totals, 95)), phases)


def histogram(records: list[LatencyRecord], bin_ms: float = DEFAULT_BIN_MS) -> list[tuple[float, int]]:
    """Fixed-width histogram of accepted totals as ``(bin_start_ms, count)``."""
    totals = [r.total_ms for r in records if r.accepted]
    if not totals:
        return []
    counts: dict[int, int] = {}
    for t in totals:
        b = int(t // bin_ms)
        counts[b] = counts.get(b, 0) + 1
    lo, hi = min(counts), max(counts)
    return [(b * bin_ms, counts.get(b, 0)) for b in range(lo, hi + 1)]


@dataclass
class ScenarioResult:
    scenario: Scenario
    records: list[LatencyRecord]
    summary: Summary
    histogram: list[tuple[float, int]]

    @property
    def name(self) -> str:
        return self.scenario.name


def run_one(scenario: Scenario, bin_ms: float = DEFAULT_BIN_MS) -> ScenarioResult:
    recs = run_scenario(scenario)
    return ScenarioResult(scenario, recs, summarize(recs), histogram(recs, bin_ms))


def compare_scenarios(scenarios: list[Scenario], bin_ms: float = DEFAULT_BIN_MS
                      ) -> list[ScenarioResult]:
    if len(scenarios) < 2:
        raise ConfigError("need at least two scenarios to compare")
    return [run_one(sc, bin_ms) for sc in scenarios]


def records_csv(records: list[LatencyRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def histogram_csv(hist: list[tuple[float, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_start_ms", "count"])
    for start, count in hist:
        w.writerow([f"{start:.3f}", count])
    return buf.getvalue()


def summary_table(results: list[ScenarioResult]) -> str:
    head = f"{'scenario':<20} {'n':>4} {'acc%':>6} {'mean_ms':>11} {'median_ms':>11} {'p95_ms':>11}"
    lines = [head, "-" * len(head)]
    for res in results:
        s = res.summary
        lines.append(f"{res.name:<20} {s.n:>4} {100 * s.acceptance_rate:>6.1f} "
                     f"{s.mean_ms:>11.1f} {s.median_ms:>11.1f} {s.p95_ms:>11.1f}")
    return "\n".join(lines)
