"""Deterministic discrete-event kernel, latency models, fault plans and traces.

Events fire in ``(fire_at, seq)`` order where ``seq`` is assigned when the
event is scheduled, so two runs with the same seed and the same handlers
produce identical traces. All randomness flows from ``Simulator.rng``.
"""
from __future__ import annotations

import enum
import gzip
import heapq
import json
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Optional

NodeId = str


class UnconfiguredPair(KeyError):
    pass


class UnknownNode(KeyError):
    pass


class SimEvent(NamedTuple):
    fire_at: float
    seq: int
    target: str
    payload: Any


class Simulator:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0.0
        self._seq = 0
        self._queue: list[SimEvent] = []
        self.handlers: dict[str, Callable[[Any], None]] = {}
        self.crash_at: dict[str, float] = {}
        self.fault_plan: Optional[FaultPlan] = None
        self.trace = Trace(seed)
        self.events_processed = 0

    def register(self, target: str, handler: Callable[[Any], None]) -> None:
        self.handlers[target] = handler

    def schedule_after(self, delay_ms: float, target: str, payload: Any) -> int:
        if delay_ms < 0 or math.isnan(delay_ms):
            raise ValueError(f"delay must be non-negative, got {delay_ms}")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, SimEvent(self.now + delay_ms, seq, target, payload))
        return seq

    def is_crashed(self, node: str, at: Optional[float] = None) -> bool:
        t = self.now if at is None else at
        c = self.crash_at.get(node)
        return c is not None and t >= c

    def pending(self) -> int:
        return len(self._queue)

    def run(self, until_ms: Optional[float] = None) -> "Trace":
        """Pop events until the queue drains or the next one is past ``until_ms``."""
        queue = self._queue
        handlers = self.handlers
        crash_at = self.crash_at
        pop = heapq.heappop
        while queue:
            ev = queue[0]
            if until_ms is not None and ev.fire_at > until_ms:
                break
            pop(queue)
            self.now = ev.fire_at
            c = crash_at.get(ev.target)
            if c is not None and ev.fire_at >= c:
                continue
            self.events_processed += 1
            handlers[ev.target](ev.payload)
        if until_ms is not None and self.now < until_ms and not queue:
            self.now = until_ms
        return self.trace


# -- latency --------------------------------------------------------------------

DISTRIBUTIONS = ("fixed", "uniform", "lognormal")


@dataclass(frozen=True)
class LatencyModel:
    class_means: Mapping[tuple[str, str], float]
    jitter_fraction: float = 0.2
    distribution: str = "lognormal"
    truncate_factor: float = 5.0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if not (0 <= self.jitter_fraction < 1):
            raise ValueError("jitter_fraction must be in [0, 1)")
        for pair, m in self.class_means.items():
            if m <= 0:
                raise ValueError(f"mean latency for {pair} must be positive")
        # lognormal parameters per mean, so sampling is one call
        sigma2 = math.log(1.0 + self.jitter_fraction ** 2)
        object.__setattr__(self, "_sigma", math.sqrt(sigma2))
        object.__setattr__(self, "_mu", {p: math.log(m) - sigma2 / 2 for p, m in self.class_means.items()})

    def mean(self, src_class: str, dst_class: str) -> float:
        try:
            return self.class_means[(src_class, dst_class)]
        except KeyError:
            try:
                return self.class_means[(dst_class, src_class)]
            except KeyError:
                raise UnconfiguredPair((src_class, dst_class)) from None


def default_latency_model(distribution: str = "lognormal", jitter_fraction: float = 0.2,
                          compute_ms: float = 5.12, iot_ms: float = 12.2,
                          cache_ms: Optional[float] = None) -> LatencyModel:
    cache = compute_ms if cache_ms is None else cache_ms
    return LatencyModel({("compute", "compute"): compute_ms, ("iot", "compute"): iot_ms,
                         ("compute", "cache"): cache},
                        jitter_fraction, distribution)


def sample_latency(model: LatencyModel, src_class: str, dst_class: str, rng: random.Random) -> float:
    mean = model.mean(src_class, dst_class)
    dist = model.distribution
    if dist == "fixed" or model.jitter_fraction == 0:
        return mean
    if dist == "uniform":
        j = model.jitter_fraction
        return mean * (1.0 + j * (2.0 * rng.random() - 1.0))
    mu = model._mu.get((src_class, dst_class))
    if mu is None:
        mu = model._mu[(dst_class, src_class)]
    return min(rng.lognormvariate(mu, model._sigma), model.truncate_factor * mean)


# -- faults ---------------------------------------------------------------------

class ByzantineScenario(str, enum.Enum):
    UNAUTHORIZED_PROPOSER = "UnauthorizedProposer"
    REQUEST_INTERFERENCE = "RequestInterference"


@dataclass(frozen=True)
class FaultPlan:
    """Adversary description.

    ``withhold_designated`` makes Byzantine nodes that are legitimately
    designated stay silent instead of proposing, which is what forces the
    timeout-driven reassignment path.
    """

    byzantine: Mapping[NodeId, ByzantineScenario] = field(default_factory=dict)
    crashes: Mapping[NodeId, float] = field(default_factory=dict)
    withhold_designated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "byzantine",
                           {n: ByzantineScenario(s) for n, s in sorted(self.byzantine.items())})
        object.__setattr__(self, "crashes", dict(sorted(self.crashes.items())))

    def faulty(self) -> set[NodeId]:
        return set(self.byzantine) | set(self.crashes)

    def within_bound(self, f: int) -> bool:
        return len(self.faulty()) <= f

    def scenario(self, node: NodeId) -> Optional[ByzantineScenario]:
        return self.byzantine.get(node)

    def to_record(self) -> dict:
        return {"byzantine": {n: s.value for n, s in self.byzantine.items()},
                "crashes": dict(self.crashes), "withhold_designated": self.withhold_designated}


def inject_faults(sim: Simulator, plan: FaultPlan) -> Simulator:
    for node in sorted(plan.faulty()):
        if node not in sim.handlers:
            raise UnknownNode(node)
    sim.fault_plan = plan
    for node, t in plan.crashes.items():
        sim.crash_at[node] = t
    for node, scenario in plan.byzantine.items():
        sim.trace.record(sim.now, node, "fault", {"byzantine": scenario.value})
    for node, t in plan.crashes.items():
        sim.trace.record(sim.now, node, "fault", {"crash_at": t})
    return sim


# -- trace ------------------------------------------------------------------------

class TraceRecord(NamedTuple):
    t: float
    node: str
    kind: str
    detail: Any


class Trace:
    """Ordered event log plus the seed (and optional config) needed to rerun it."""

    def __init__(self, rng_seed: int, config: Optional[dict] = None):
        self.rng_seed = rng_seed
        self.config = config
        self.records: list[TraceRecord] = []

    def record(self, t: float, node: str, kind: str, detail: Any = None) -> None:
        self.records.append(TraceRecord(t, node, kind, detail))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def of_kind(self, *kinds: str) -> list[TraceRecord]:
        wanted = set(kinds)
        return [r for r in self.records if r.kind in wanted]

    def header(self) -> dict:
        return {"kind": "header", "seed": self.rng_seed, "config": self.config}

    def lines(self) -> Iterable[str]:
        dumps = json.dumps
        yield dumps(self.header(), sort_keys=True, separators=(",", ":"))
        for r in self.records:
            yield dumps({"t": r.t, "node": r.node, "kind": r.kind, "detail": r.detail},
                        sort_keys=True, separators=(",", ":"))

    def to_jsonl(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path) -> None:
        path = str(path)
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "wt", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty trace")
        head = json.loads(lines[0])
        if head.get("kind") != "header":
            raise ValueError("trace does not start with a header record")
        trace = cls(head["seed"], head.get("config"))
        for ln in lines[1:]:
            rec = json.loads(ln)
            trace.records.append(TraceRecord(rec["t"], rec["node"], rec["kind"], rec["detail"]))
        return trace

    @classmethod
    def read(cls, path) -> "Trace":
        path = str(path)
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "rt", encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())
