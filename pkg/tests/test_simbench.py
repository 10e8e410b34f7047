import json
import math
import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tangleshare import simbench
from tangleshare.errors import ConfigError, EmptyInput
from tangleshare.simbench import (
    Calibration,
    ClientProfile,
    Dist,
    LatencyRecord,
    NodeProfile,
    Scenario,
    geometric_attempts,
    run_scenario,
    summarize,
)

CAL = Calibration.load()


def record(i, total, outcome="accepted"):
    return LatencyRecord(i, 0.0, 0.0, 0.0, 0.0, total, outcome)


def means(preset, seed=7):
    return {r.name: r.summary.mean_ms
            for r in simbench.compare_scenarios(CAL.preset(preset, seed))}


def test_degenerate_profile_total_is_bundle_build():
    client = ClientProfile("c", 224.0, Dist("constant", value=0.0))
    node = NodeProfile("n", Dist("constant", value=0.0), math.inf)
    recs = run_scenario(Scenario(client, node, 0, n_messages=20))
    assert all(r.total_ms == 224.0 for r in recs)


def test_same_seed_identical():
    sc = CAL.preset("provider-comparison", 3)[1]
    assert run_scenario(sc) == run_scenario(sc)


def test_different_seed_differs():
    a, b = (run_scenario(CAL.preset("provider-comparison", s)[0]) for s in (1, 2))
    assert a != b


def test_summary_basic():
    s = summarize([record(1, 1.0), record(2, 2.0), record(3, 3.0)])
    assert s.mean_ms == 2.0 and s.median_ms == 2.0 and s.acceptance_rate == 1.0


def test_all_rejected():
    recs = [record(i, 0.0, "rejected:blacklisted") for i in range(3)]
    assert simbench.acceptance_rate(recs) == 0.0
    with pytest.raises(EmptyInput) as exc:
        summarize(recs)
    assert exc.value.acceptance_rate == 0.0


def test_rejections_excluded_from_latency():
    s = summarize([record(1, 10.0), record(2, 99999.0, "rejected:rate-limited")])
    assert s.mean_ms == 10.0 and s.acceptance_rate == 0.5


def test_provider2_rejects_after_about_thirty():
    recs = run_scenario(CAL.preset("provider-comparison", 7)[1])
    first = next(r.message_index for r in recs if not r.accepted)
    assert 28 <= first <= 34
    assert all(not r.accepted for r in recs if r.message_index > first)


def test_provider1_mainnet_near_thirty_seconds():
    m = means("provider-comparison")["provider1-mainnet"]
    assert 24_000 <= m <= 36_000


def test_au_slower_on_devnet():
    m = means("devnet-au-pc")
    assert m["au-devnet"] > m["pc-devnet"]


def test_au_pc_mainnet_close():
    m = means("mainnet-au-pc")
    assert abs(m["au-mainnet"] - m["pc-mainnet"]) / m["pc-mainnet"] < 0.10


def test_mainnet_slower_than_devnet_same_client():
    pc = CAL.clients["pc"]
    node = CAL.providers["devnet-node"]
    dev = summarize(run_scenario(Scenario(pc, node, CAL.networks["devnet"], rng_seed=7)))
    main = summarize(run_scenario(Scenario(pc, node, CAL.networks["mainnet"], rng_seed=7)))
    assert main.mean_ms > dev.mean_ms


def test_pow_monotone_in_difficulty_per_message():
    pc, node = CAL.clients["pc"], CAL.providers["provider1"]
    low = run_scenario(Scenario(pc, node, 9, rng_seed=11))
    high = run_scenario(Scenario(pc, node, 14, rng_seed=11))
    assert all(h.pow_attempts >= l.pow_attempts for l, h in zip(low, high))


@given(st.floats(min_value=1e-12, max_value=1.0), st.integers(1, 20))
def test_geometric_attempts_positive(u, d):
    assert geometric_attempts(u, d) >= 1


def test_geometric_mean():
    # midpoint rule over u approximates E[attempts] = 2**d
    n = 20000
    m = statistics.fmean(geometric_attempts((k + 0.5) / n, 6) for k in range(n))
    assert abs(m - 64) / 64 < 0.02


def test_histogram_counts_accepted():
    recs = [record(1, 100.0), record(2, 600.0), record(3, 700.0),
            record(4, 50.0, "rejected:blacklisted")]
    assert simbench.histogram(recs, 500) == [(0.0, 1), (500.0, 2)]


def test_csv_format():
    recs = run_scenario(CAL.preset("devnet-au-pc", 1)[0])
    lines = simbench.records_csv(recs).splitlines()
    assert lines[0] == "msg_index,bundle_ms,tips_ms,pow_ms,net_ms,total_ms,outcome"
    assert len(lines) == 101
    first = lines[1].split(",")
    assert math.isclose(sum(map(float, first[1:5])), float(first[5]), abs_tol=2e-3)


def test_compare_needs_two():
    with pytest.raises(ConfigError):
        simbench.compare_scenarios(CAL.preset("devnet-au-pc")[:1])


def test_unknown_preset():
    with pytest.raises(ConfigError):
        CAL.preset("nope")


def test_load_scenarios_file(tmp_path):
    spec = {"scenarios": [
        {"name": "custom", "client": {"mam_overhead_ms": 100, "network_rtt": 5},
         "provider": {"tip_latency": {"kind": "lognormal", "mean_ms": 200, "sigma": 0.2},
                      "pow_rate": 50000},
         "network": {"difficulty": 8}, "n_messages": 10},
        {"name": "named", "client": "au", "provider": "devnet-node", "network": "devnet"},
    ]}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(spec))
    a, b = simbench.load_scenarios(path, rng_seed=4)
    assert a.difficulty == 8 and a.n_messages == 10 and a.rng_seed == 4
    assert b.client == CAL.clients["au"]
    assert len(run_scenario(a)) == 10


def test_bad_scenario_field(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"client": "nobody", "provider": "provider1",
                                "network": "mainnet"}))
    with pytest.raises(ConfigError):
        simbench.load_scenarios(path)


def test_dist_mean_ms_parameterization():
    d = Dist.from_json({"kind": "lognormal", "mean_ms": 400, "sigma": 0.5})
    assert math.isclose(d.mean, 400)
