import random
import statistics

import pytest

from bftsched.harness import ScenarioConfig, simulate
from bftsched.simnet import (
    FaultPlan,
    LatencyModel,
    Simulator,
    Trace,
    UnconfiguredPair,
    UnknownNode,
    default_latency_model,
    inject_faults,
    sample_latency,
)

from scenario_fixtures import small_config


def test_equal_times_fire_in_scheduling_order():
    sim = Simulator(0)
    seen = []
    sim.register("x", seen.append)
    for i in range(5):
        sim.schedule_after(3.0, "x", i)
    sim.run()
    assert seen == [0, 1, 2, 3, 4]


def test_zero_delay_precedes_later_events_at_same_time():
    sim = Simulator(0)
    seen = []

    def handler(p):
        seen.append(p)
        if p == "first":
            sim.schedule_after(0.0, "x", "child")

    sim.register("x", handler)
    sim.schedule_after(1.0, "x", "first")
    sim.schedule_after(1.0 + 1e-9, "x", "later")
    sim.run()
    assert seen == ["first", "child", "later"]


def test_negative_delay_rejected():
    with pytest.raises(ValueError):
        Simulator(0).schedule_after(-1.0, "x", None)


def test_empty_simulation_is_quiescent():
    sim = Simulator(3)
    trace = sim.run()
    assert len(trace) == 0 and sim.now == 0.0
    sim.run(until_ms=50.0)
    assert sim.now == 50.0


def test_fixed_latencies():
    m = default_latency_model("fixed")
    rng = random.Random(0)
    assert sample_latency(m, "compute", "compute", rng) == 5.12
    assert sample_latency(m, "iot", "compute", rng) == 12.2
    assert sample_latency(m, "compute", "iot", rng) == 12.2


def test_unconfigured_pair():
    with pytest.raises(UnconfiguredPair):
        sample_latency(default_latency_model("fixed"), "iot", "iot", random.Random(0))


def test_lognormal_mean_converges():
    m = default_latency_model("lognormal", 0.2)
    rng = random.Random(11)
    xs = [sample_latency(m, "compute", "compute", rng) for _ in range(1_000_000)]
    assert statistics.fmean(xs) == pytest.approx(5.12, rel=0.01)
    assert max(xs) <= 5 * 5.12


def test_uniform_stays_within_jitter():
    m = LatencyModel({("a", "b"): 10.0}, 0.2, "uniform")
    rng = random.Random(1)
    xs = [sample_latency(m, "a", "b", rng) for _ in range(10_000)]
    assert 8.0 <= min(xs) and max(xs) <= 12.0


def test_bad_latency_model_rejected():
    with pytest.raises(ValueError):
        LatencyModel({("a", "b"): 1.0}, 0.2, "pareto")
    with pytest.raises(ValueError):
        LatencyModel({("a", "b"): -1.0})


def test_unknown_fault_target():
    sim = Simulator(0)
    sim.register("n00", lambda p: None)
    with pytest.raises(UnknownNode):
        inject_faults(sim, FaultPlan({"n99": "UnauthorizedProposer"}))


def test_fault_plan_bound():
    plan = FaultPlan({"a": "UnauthorizedProposer"}, {"b": 10.0})
    assert plan.within_bound(2) and not plan.within_bound(1)


def test_trace_round_trip(tmp_path):
    t = Trace(5, {"name": "x"})
    t.record(1.5, "n00", "kind", {"a": [1, 2]})
    for name in ("t.jsonl", "t.jsonl.gz"):
        t.write(tmp_path / name)
        back = Trace.read(tmp_path / name)
        assert back.to_jsonl() == t.to_jsonl()
        assert back.rng_seed == 5 and back.config == {"name": "x"}


def test_trace_requires_header():
    with pytest.raises(ValueError):
        Trace.from_jsonl('{"t": 0, "node": "x", "kind": "k", "detail": null}\n')


# -- scenario-level -------------------------------------------------------------

def test_same_seed_same_trace():
    cfg = small_config(seed=4)
    assert simulate(cfg).trace.to_jsonl() == simulate(cfg).trace.to_jsonl()


def test_different_seeds_are_allowed_to_differ():
    a = simulate(small_config(seed=1)).trace
    b = simulate(small_config(seed=2)).trace
    assert a.rng_seed != b.rng_seed
    assert a.to_jsonl() != b.to_jsonl()


def test_causality_every_delivery_after_send():
    run = simulate(small_config(seed=9, trace_messages=True))
    recvs = run.trace.of_kind("recv")
    assert recvs
    assert all(r.t > r.detail["sent"] for r in recvs)


def test_unauthorized_proposers_attack_every_request():
    cfg = small_config(compute_nodes=16, f=5, count=2, seed=3,
                       byzantine={n: "UnauthorizedProposer" for n in ("n01", "n04", "n07", "n10", "n13")})
    run = simulate(cfg)
    rids = {r.detail["rid"] for r in run.trace.of_kind("request_sent")}
    attacked = {r.detail["rid"] for r in run.trace.of_kind("proposal") if r.detail["malicious"]}
    assert rids and rids <= attacked


def test_interference_targets_previous_active_request():
    # n02 starts with the most free capacity, so it is designated for every request
    cfg = small_config(compute_nodes=4, f=1, count=2, seed=5, interval_ms=30_000.0,
                       byzantine={"n02": "RequestInterference"},
                       profiles={"default": {"cpu_used": 1000, "mem_used": 2000}, "nodes": {"n02": {"cpu_used": 0, "mem_used": 0}}})
    run = simulate(cfg)
    forged = [r.detail for r in run.trace.of_kind("proposal") if r.detail["malicious"]]
    assert forged, "expected an interference proposal"
    for d in forged:
        assert d["rid"] != d["trigger"][0]
    errors = {r.detail["error"] for r in run.trace.of_kind("verdict") if r.detail["txn"] in {d["txn"] for d in forged}}
    assert errors == {"DuplicateConfirmation"}


def test_crashed_node_goes_silent():
    cfg = small_config(compute_nodes=4, f=1, seed=2, crashes={"n03": 500.0})
    run = simulate(cfg)
    late = [r for r in run.trace if r.node == "n03" and r.t >= 500.0]
    assert late == []
    # tasks are not re-executed, so only requests with no work on n03 can finish
    table = run.deployment.compute["n00"].chain.schedule_table
    for row in run.report.rows:
        uses_crashed = "n03" in table[row.request_id].schedule.assignments.values()
        assert row.status == ("IncompleteTrace" if uses_crashed else "complete")


def test_exploratory_flag_when_faults_exceed_f():
    cfg = small_config(compute_nodes=4, f=1, seed=2, crashes={"n02": 0.0, "n03": 0.0}, drain_ms=5000.0)
    run = simulate(cfg)
    assert run.report.exploratory
