"""Scenario configuration and end-to-end runs."""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Optional

from .cluster import Deployment, NodeParams
from .crypto import digest_record
from .ledger import GenesisConfig
from .metrics import MetricsReport, compute_metrics
from .scheduler import DesignationWeights, ResourceState, SchedulerError, WorkflowDAG
from .simnet import DISTRIBUTIONS, ByzantineScenario, FaultPlan, Simulator, Trace, default_latency_model, inject_faults


class InvalidConfig(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def compute_id(i: int) -> str:
    return f"n{i:02d}"


def iot_id(i: int) -> str:
    return f"iot{i:02d}"


DEFAULT_PROFILE = {"cpu_total": 4000.0, "cpu_used": 0.0, "mem_total": 8192.0, "mem_used": 0.0}


@dataclass
class ScenarioConfig:
    """Mirrors the scenario file; field names are the JSON keys."""

    name: str = "scenario"
    compute_nodes: int = 4
    iot_nodes: int = 1
    f: int = 1
    seed: int = 0
    weights: dict = field(default_factory=lambda: {"w_c": 0.5, "w_m": 0.5})
    failure_timeout_ms: float = 5000.0
    batch_size: int = 10
    resource_interval_ms: float = 10_000.0
    view_timeout_ms: float = 2000.0
    processing_ms: float = 0.02
    batch_window_ms: float = 0.0
    latency: dict = field(default_factory=lambda: {
        "distribution": "lognormal", "jitter_fraction": 0.2,
        "compute_compute_ms": 5.12, "iot_compute_ms": 12.2, "cache_ms": 5.12})
    workflows: list = field(default_factory=list)
    request_plan: dict = field(default_factory=lambda: {
        "workflow_id": None, "count": 1, "interval_ms": 30_000.0, "start_ms": 1000.0, "stagger_ms": 0.0,
        "persist_data": False, "per_node": {}})
    faults: dict = field(default_factory=lambda: {"byzantine": {}, "crashes": {}, "withhold_designated": False})
    resource_profiles: dict = field(default_factory=lambda: {"default": dict(DEFAULT_PROFILE), "nodes": {}})
    drain_ms: float = 60_000.0
    trace_messages: bool = True

    # -- parsing -------------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ScenarioConfig":
        if not isinstance(doc, Mapping):
            raise InvalidConfig(["<root>: scenario must be an object"])
        known = {f.name for f in fields(cls)}
        errors = [f"{k}: unknown field" for k in sorted(doc) if k not in known]
        if errors:
            raise InvalidConfig(errors)
        cfg = cls()
        for k, v in doc.items():
            default = getattr(cfg, k)
            if isinstance(default, dict) and isinstance(v, Mapping):
                merged = dict(default)
                merged.update(v)
                v = merged
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfig([f"<file>: not valid JSON ({exc})"]) from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), sort_keys=True))

    def digest(self) -> str:
        return digest_record(self.to_dict())

    def replace(self, **changes) -> "ScenarioConfig":
        doc = self.to_dict()
        doc.update(changes)
        return ScenarioConfig.from_dict(doc)

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        errors: list[str] = []

        def need(cond, msg):
            if not cond:
                errors.append(msg)

        for name in ("compute_nodes", "iot_nodes", "f", "seed", "batch_size"):
            need(isinstance(getattr(self, name), int) and not isinstance(getattr(self, name), bool),
                 f"{name}: must be an integer")
        if errors:
            raise InvalidConfig(errors)
        need(self.compute_nodes >= 1, "compute_nodes: must be >= 1")
        need(self.f >= 0, "f: must be >= 0")
        need(self.compute_nodes >= 3 * self.f + 1,
             f"f: compute_nodes={self.compute_nodes} < 3*f+1={3 * self.f + 1}")
        need(self.iot_nodes >= 0, "iot_nodes: must be >= 0")
        need(self.batch_size >= 1, "batch_size: must be >= 1")
        for name in ("failure_timeout_ms", "resource_interval_ms", "view_timeout_ms"):
            need(_num(getattr(self, name)) and getattr(self, name) > 0, f"{name}: must be a positive number")
        for name in ("processing_ms", "batch_window_ms", "drain_ms"):
            need(_num(getattr(self, name)) and getattr(self, name) >= 0, f"{name}: must be a non-negative number")
        try:
            DesignationWeights(float(self.weights.get("w_c", -1)), float(self.weights.get("w_m", -1)))
        except (ValueError, TypeError) as exc:
            errors.append(f"weights: {exc}")
        lat = self.latency
        need(lat.get("distribution") in DISTRIBUTIONS, f"latency.distribution: one of {', '.join(DISTRIBUTIONS)}")
        jf = lat.get("jitter_fraction")
        need(_num(jf) and 0 <= jf < 1, "latency.jitter_fraction: must be in [0, 1)")
        for k in ("compute_compute_ms", "iot_compute_ms", "cache_ms"):
            need(_num(lat.get(k)) and lat.get(k) > 0, f"latency.{k}: must be a positive number")
        dags = {}
        for i, doc in enumerate(self.workflows):
            try:
                dag = WorkflowDAG.from_document(doc)
                dags[dag.workflow_id] = dag
            except SchedulerError as exc:
                errors.append(f"workflows[{i}]: {exc}")
        plan = self.request_plan
        for k in sorted(plan):
            if k not in ("workflow_id", "count", "interval_ms", "start_ms", "stagger_ms", "persist_data", "per_node"):
                errors.append(f"request_plan.{k}: unknown field")
        for where, p in [("request_plan", plan)] + [(f"request_plan.per_node.{n}", {**plan, **o})
                                                    for n, o in sorted(plan.get("per_node", {}).items())]:
            need(isinstance(p.get("count"), int) and p["count"] >= 0, f"{where}.count: must be a non-negative integer")
            need(_num(p.get("interval_ms")) and p["interval_ms"] > 0, f"{where}.interval_ms: must be > 0")
            need(_num(p.get("start_ms")) and p["start_ms"] >= 0, f"{where}.start_ms: must be >= 0")
            if self.iot_nodes and p.get("count"):
                need(p.get("workflow_id") in dags, f"{where}.workflow_id: {p.get('workflow_id')!r} is not defined")
        iots = {iot_id(i) for i in range(self.iot_nodes)}
        for n in plan.get("per_node", {}):
            need(n in iots, f"request_plan.per_node.{n}: unknown IoT node")
        computes = {compute_id(i) for i in range(self.compute_nodes)}
        for n, s in self.faults.get("byzantine", {}).items():
            need(n in computes, f"faults.byzantine.{n}: unknown compute node")
            need(s in {b.value for b in ByzantineScenario}, f"faults.byzantine.{n}: unknown scenario {s!r}")
        for n, t in self.faults.get("crashes", {}).items():
            need(n in computes or n in iots, f"faults.crashes.{n}: unknown node")
            need(_num(t) and t >= 0, f"faults.crashes.{n}: crash time must be >= 0")
        profiles = self.resource_profiles
        for n, prof in [("default", profiles.get("default", {}))] + sorted(profiles.get("nodes", {}).items()):
            if n != "default" and n not in computes:
                errors.append(f"resource_profiles.nodes.{n}: unknown compute node")
                continue
            try:
                _profile(profiles, n if n != "default" else None)
            except (ValueError, TypeError, KeyError) as exc:
                errors.append(f"resource_profiles.{n}: {exc}")
        if errors:
            raise InvalidConfig(errors)

    # -- derived objects -----------------------------------------------------

    def members(self) -> tuple[str, ...]:
        return tuple(compute_id(i) for i in range(self.compute_nodes))

    def dags(self) -> list[WorkflowDAG]:
        return [WorkflowDAG.from_document(d) for d in self.workflows]

    def fault_plan(self) -> FaultPlan:
        fp = self.faults
        return FaultPlan(dict(fp.get("byzantine", {})), {k: float(v) for k, v in fp.get("crashes", {}).items()},
                         bool(fp.get("withhold_designated", False)))

    def within_bound(self) -> bool:
        return self.fault_plan().within_bound(self.f)

    def request_times(self) -> list[tuple[float, str, str, int, bool]]:
        """(send time, iot node, workflow id, index, persist) for every planned request."""
        out = []
        plan = self.request_plan
        for i in range(self.iot_nodes):
            node = iot_id(i)
            p = {**plan, **plan.get("per_node", {}).get(node, {})}
            start = float(p["start_ms"]) + i * float(p.get("stagger_ms", 0.0))
            for k in range(p["count"]):
                out.append((start + k * float(p["interval_ms"]), node, p["workflow_id"], k,
                            bool(p.get("persist_data", False))))
        return sorted(out)


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _profile(profiles: Mapping, node: Optional[str]) -> ResourceState:
    prof = {**DEFAULT_PROFILE, **profiles.get("default", {})}
    if node is not None:
        prof.update(profiles.get("nodes", {}).get(node, {}))
    return ResourceState(float(prof["cpu_total"]), float(prof["cpu_used"]),
                         float(prof["mem_total"]), float(prof["mem_used"]))


@dataclass
class ScenarioRun:
    config: ScenarioConfig
    sim: Simulator
    deployment: Deployment
    trace: Trace
    report: Optional[MetricsReport] = None


def build(config: ScenarioConfig) -> ScenarioRun:
    config.validate()
    sim = Simulator(config.seed)
    sim.trace.config = config.to_dict()
    lat = config.latency
    latency = default_latency_model(lat["distribution"], float(lat["jitter_fraction"]),
                                    float(lat["compute_compute_ms"]), float(lat["iot_compute_ms"]),
                                    float(lat["cache_ms"]))
    w = config.weights
    genesis = GenesisConfig(config.members(), config.f, config.batch_size, float(config.failure_timeout_ms),
                            DesignationWeights(float(w["w_c"]), float(w["w_m"])))
    params = NodeParams(float(config.view_timeout_ms), float(config.processing_ms), float(config.batch_window_ms),
                        float(config.resource_interval_ms), bool(config.trace_messages))
    dep = Deployment(sim, latency, genesis, params)
    for m in genesis.members:
        dep.add_compute(m, _profile(config.resource_profiles, m))
    for i in range(config.iot_nodes):
        dep.add_iot(iot_id(i), genesis.members[i % len(genesis.members)])
    plan = config.fault_plan()
    inject_faults(sim, plan)
    dep.set_faults(plan)
    if not plan.within_bound(config.f):
        sim.trace.record(0.0, "harness", "exploratory", {"faulty": len(plan.faulty()), "f": config.f})
    dep.add_admin(config.dags())
    requests = config.request_times()
    for at, node, wid, k, persist in requests:
        dep.iot[node].schedule_request(at, wid, k, persist)
    horizon = (requests[-1][0] if requests else 0.0) + float(config.drain_ms)
    n = len(genesis.members)
    for i, m in enumerate(genesis.members):
        # stagger registrar ticks across the interval so nodes do not report in lockstep
        dep.compute[m].start_registrar(config.resource_interval_ms * i / n, horizon)
    return ScenarioRun(config, sim, dep, sim.trace)


def run_built(run: ScenarioRun) -> ScenarioRun:
    config = run.config
    requests = config.request_times()
    horizon = (requests[-1][0] if requests else 0.0) + float(config.drain_ms)
    cap = horizon + (config.compute_nodes + 1) * (config.failure_timeout_ms + 2 * config.view_timeout_ms)
    run.sim.run(until_ms=cap)
    for m, node in run.deployment.compute.items():
        counts = node.replica.message_counts()
        counts["bad_signatures"] = node.replica.bad_signatures
        counts["node"] = m
        run.trace.record(run.sim.now, "harness", "counters", counts)
        if not run.sim.is_crashed(m):
            run.trace.record(run.sim.now, "harness", "chain_head",
                             {"node": m, "height": node.chain.height, "fingerprint": node.chain.fingerprint()})
    run.report = compute_metrics(run.trace)
    return run


def simulate(config: ScenarioConfig) -> ScenarioRun:
    return run_built(build(config))


def run_scenario(config: ScenarioConfig) -> tuple[Trace, MetricsReport]:
    run = simulate(config)
    return run.trace, run.report


@dataclass(frozen=True)
class SweepPoint:
    nodes: int
    f: int
    messages_per_request: float
    mean_rrt_ms: Optional[float]
    complete: int
    requests: int


def sweep_config(config: ScenarioConfig, n: int) -> ScenarioConfig:
    """``config`` resized to ``n`` compute nodes tolerating the largest f."""
    return config.replace(compute_nodes=n, f=(n - 1) // 3)


def sweep(config: ScenarioConfig, nodes: list[int]) -> list[SweepPoint]:
    points = []
    for n in nodes:
        _, report = run_scenario(sweep_config(config, n))
        a = report.aggregates
        points.append(SweepPoint(n, (n - 1) // 3, a["consensus_messages_per_request"] or 0.0,
                                 a["rrt_ms"]["mean"], a["complete"], a["requests"]))
    return points


def power_law_exponent(xs: list[float], ys: list[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    fit = statistics.linear_regression([math.log(x) for x in xs], [math.log(y) for y in ys])
    return fit.slope
