"""Designation and load-weighted (LCDWRR) schedule generation.

All functions here are pure. Randomness enters only through an explicit
``random.Random`` argument, so identical inputs and seed give an identical
:class:`Schedule`.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Sequence

from .crypto import digest_record

NodeId = str


class SchedulerError(Exception):
    pass


class EmptyCluster(SchedulerError):
    pass


class CyclicGraph(SchedulerError):
    pass


class InvalidWorkflow(SchedulerError):
    pass


class NoEligibleNode(SchedulerError):
    pass


class Infeasible(SchedulerError):
    pass


PROBABILITY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ResourceState:
    """CPU in millicores, memory in MiB."""

    cpu_total: float
    cpu_used: float
    mem_total: float
    mem_used: float

    def __post_init__(self):
        if self.cpu_total <= 0 or self.mem_total <= 0:
            raise ValueError("resource totals must be positive")
        if not (0 <= self.cpu_used <= self.cpu_total):
            raise ValueError(f"cpu_used {self.cpu_used} outside [0, {self.cpu_total}]")
        if not (0 <= self.mem_used <= self.mem_total):
            raise ValueError(f"mem_used {self.mem_used} outside [0, {self.mem_total}]")

    @property
    def cpu_avail(self) -> float:
        return self.cpu_total - self.cpu_used

    @property
    def mem_avail(self) -> float:
        return self.mem_total - self.mem_used

    def debit(self, cpu: float, mem: float) -> "ResourceState":
        return ResourceState(self.cpu_total, self.cpu_used + cpu, self.mem_total, self.mem_used + mem)

    def to_record(self) -> dict:
        return {"cpu_total": self.cpu_total, "cpu_used": self.cpu_used,
                "mem_total": self.mem_total, "mem_used": self.mem_used}

    @classmethod
    def from_record(cls, rec: Mapping) -> "ResourceState":
        return cls(rec["cpu_total"], rec["cpu_used"], rec["mem_total"], rec["mem_used"])


@dataclass(frozen=True, eq=False)
class ResourceMap:
    entries: Mapping[NodeId, ResourceState]
    snapshot_time: float = 0.0

    def __post_init__(self):
        frozen = MappingProxyType(dict(sorted(self.entries.items())))
        object.__setattr__(self, "entries", frozen)

    def __getitem__(self, node: NodeId) -> ResourceState:
        return self.entries[node]

    def __contains__(self, node: object) -> bool:
        return node in self.entries

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ResourceMap):
            return NotImplemented
        return self.snapshot_time == other.snapshot_time and dict(self.entries) == dict(other.entries)

    def nodes(self) -> list[NodeId]:
        return list(self.entries)

    def to_record(self) -> dict:
        return {"snapshot_time": self.snapshot_time,
                "entries": {n: r.to_record() for n, r in self.entries.items()}}

    @classmethod
    def from_record(cls, rec: Mapping) -> "ResourceMap":
        return cls({n: ResourceState.from_record(r) for n, r in rec["entries"].items()},
                   rec.get("snapshot_time", 0.0))

    def digest(self) -> str:
        cached = self.__dict__.get("_digest")
        if cached is None:
            cached = digest_record(self.to_record())
            object.__setattr__(self, "_digest", cached)
        return cached


@dataclass(frozen=True)
class DesignationWeights:
    w_c: float = 0.5
    w_m: float = 0.5

    def __post_init__(self):
        if self.w_c < 0 or self.w_m < 0 or abs(self.w_c + self.w_m - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got ({self.w_c}, {self.w_m})")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    app_id: str
    cpu_req: float
    mem_req: float
    exec_duration: float = 0.0

    def __post_init__(self):
        if self.cpu_req <= 0 or self.mem_req <= 0:
            raise ValueError(f"task {self.task_id}: resource requests must be positive")
        if self.exec_duration < 0:
            raise ValueError(f"task {self.task_id}: exec_duration must be >= 0")

    def to_record(self) -> dict:
        return {"task_id": self.task_id, "app_id": self.app_id,
                "cpu_req_millicores": self.cpu_req, "mem_req_mib": self.mem_req,
                "exec_duration_ms": self.exec_duration}


@dataclass(frozen=True, eq=False)
class WorkflowDAG:
    """Workflow dependency graph.

    Construction checks that tasks are non-empty and edge endpoints exist.
    Acyclicity is checked by :func:`compute_levels` (and therefore by
    :meth:`from_document`).
    """

    workflow_id: str
    tasks: tuple[TaskSpec, ...]
    edges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        tasks = tuple(sorted(self.tasks, key=lambda t: t.task_id))
        edges = tuple(sorted({(a, b) for a, b in self.edges}))
        if not tasks:
            raise InvalidWorkflow(f"workflow {self.workflow_id} has no tasks")
        by_id = {t.task_id: t for t in tasks}
        if len(by_id) != len(tasks):
            raise InvalidWorkflow(f"workflow {self.workflow_id} has duplicate task ids")
        for a, b in edges:
            if a not in by_id or b not in by_id:
                raise InvalidWorkflow(f"edge ({a}, {b}) references an unknown task")
        preds: dict[str, list[str]] = {t: [] for t in by_id}
        succs: dict[str, list[str]] = {t: [] for t in by_id}
        for a, b in edges:
            preds[b].append(a)
            succs[a].append(b)
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_preds", {k: tuple(v) for k, v in preds.items()})
        object.__setattr__(self, "_succs", {k: tuple(v) for k, v in succs.items()})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WorkflowDAG):
            return NotImplemented
        return (self.workflow_id, self.tasks, self.edges) == (other.workflow_id, other.tasks, other.edges)

    def task(self, task_id: str) -> TaskSpec:
        return self._by_id[task_id]

    def task_ids(self) -> list[str]:
        return list(self._by_id)

    def has_task(self, task_id: str) -> bool:
        return task_id in self._by_id

    def predecessors(self, task_id: str) -> tuple[str, ...]:
        return self._preds[task_id]

    def successors(self, task_id: str) -> tuple[str, ...]:
        return self._succs[task_id]

    def to_document(self) -> dict:
        return {"workflow_id": self.workflow_id,
                "tasks": [t.to_record() for t in self.tasks],
                "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_document(cls, doc: Mapping) -> "WorkflowDAG":
        """Parse a workflow definition document and reject cycles."""
        try:
            tasks = tuple(
                TaskSpec(t["task_id"], t.get("app_id", t["task_id"]), t["cpu_req_millicores"],
                         t["mem_req_mib"], t.get("exec_duration_ms", 0.0))
                for t in doc["tasks"]
            )
            edges = tuple((str(a), str(b)) for a, b in doc.get("edges", []))
            dag = cls(str(doc["workflow_id"]), tasks, edges)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidWorkflow(f"malformed workflow document: {exc}") from exc
        compute_levels(dag)
        return dag


@dataclass(frozen=True, eq=False)
class Schedule:
    request_id: str
    proposer: NodeId
    assignments: Mapping[str, NodeId]
    levels: Mapping[str, int]

    def __post_init__(self):
        object.__setattr__(self, "assignments", MappingProxyType(dict(sorted(self.assignments.items()))))
        object.__setattr__(self, "levels", MappingProxyType(dict(sorted(self.levels.items()))))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Schedule):
            return NotImplemented
        return self.to_record() == other.to_record()

    def tasks_for(self, node: NodeId) -> list[str]:
        return [t for t, n in self.assignments.items() if n == node]

    def to_record(self) -> dict:
        return {"request_id": self.request_id, "proposer": self.proposer,
                "assignments": dict(self.assignments), "levels": dict(self.levels)}

    @classmethod
    def from_record(cls, rec: Mapping) -> "Schedule":
        return cls(rec["request_id"], rec["proposer"], dict(rec["assignments"]), dict(rec["levels"]))


@dataclass(frozen=True)
class SelectionDistribution:
    weights: Mapping[NodeId, float]
    probabilities: Mapping[NodeId, float]


# -- designation ------------------------------------------------------------

def designation_score(r: ResourceState, weights: DesignationWeights) -> float:
    # normalised so millicores and MiB are commensurable
    return weights.w_c * (r.cpu_avail / r.cpu_total) + weights.w_m * (r.mem_avail / r.mem_total)


def designate(members: Sequence[NodeId], resources: ResourceMap,
              weights: DesignationWeights = DesignationWeights()) -> NodeId:
    """Deterministically pick the node with the most normalised free capacity.

    Ties go to the lexicographically smallest id, so the result does not
    depend on the order of ``members``.
    """
    if not members:
        raise EmptyCluster("cannot designate from an empty member set")
    best = None
    best_key = None
    for node in members:
        key = (-designation_score(resources[node], weights), node)
        if best_key is None or key < best_key:
            best, best_key = node, key
    return best


# -- LCDWRR -------------------------------------------------------------------

def compute_levels(dag: WorkflowDAG) -> dict[str, int]:
    # Kahn's algorithm; a level is the longest path length from any source
    indegree = {t: len(dag.predecessors(t)) for t in dag.task_ids()}
    frontier = sorted(t for t, d in indegree.items() if d == 0)
    levels = {t: 0 for t in frontier}
    seen = 0
    while frontier:
        nxt = []
        for t in frontier:
            seen += 1
            for s in dag.successors(t):
                levels[s] = max(levels.get(s, 0), levels[t] + 1)
                indegree[s] -= 1
                if indegree[s] == 0:
                    nxt.append(s)
        frontier = sorted(nxt)
    if seen != len(indegree):
        raise CyclicGraph(f"workflow {dag.workflow_id} contains a cycle")
    return dict(sorted(levels.items()))


def eligible_nodes(task: TaskSpec, resources: ResourceMap) -> set[NodeId]:
    return {n for n, r in resources.entries.items()
            if task.cpu_req <= r.cpu_avail and task.mem_req <= r.mem_avail}


def node_load(r: ResourceState) -> float:
    return 0.5 * r.cpu_used / r.cpu_total + 0.5 * r.mem_used / r.mem_total


def selection_weight(load: float) -> float:
    return 1.0 / (load + 0.1)


def selection_distribution(task: TaskSpec, resources: ResourceMap) -> SelectionDistribution:
    eligible = sorted(eligible_nodes(task, resources))
    if not eligible:
        raise NoEligibleNode(f"no node can host task {task.task_id}")
    weights = {n: selection_weight(node_load(resources[n])) for n in eligible}
    total = sum(weights.values())
    probs = {n: w / total for n, w in weights.items()}
    return SelectionDistribution(weights, probs)


def sample_node(dist: SelectionDistribution, rng: random.Random) -> NodeId:
    u = rng.random()
    acc = 0.0
    node = None
    for node, p in dist.probabilities.items():
        acc += p
        if u < acc:
            return node
    return node  # u landed in the rounding gap at the top


def generate_schedule(dag: WorkflowDAG, resources: ResourceMap, rng: random.Random,
                      request_id: str, proposer: NodeId) -> Schedule:
    """LCDWRR: level by level, tasks in id order, load-weighted sampling.

    Each assignment debits a working copy of the chosen node, which also
    raises that node's load for later draws.
    """
    levels = compute_levels(dag)
    working = dict(resources.entries)
    assignments: dict[str, NodeId] = {}
    for _, task_id in sorted((lvl, t) for t, lvl in levels.items()):
        task = dag.task(task_id)
        try:
            dist = selection_distribution(task, ResourceMap(working, resources.snapshot_time))
        except NoEligibleNode as exc:
            raise Infeasible(str(exc)) from exc
        node = sample_node(dist, rng)
        assignments[task_id] = node
        working[node] = working[node].debit(task.cpu_req, task.mem_req)
    return Schedule(request_id, proposer, assignments, levels)


# -- validation rules ---------------------------------------------------------

Rule = Callable[[Schedule, object, ResourceMap], bool]


@dataclass(frozen=True)
class ValidationRuleSet:
    rules: tuple[tuple[str, Rule], ...] = field(default_factory=tuple)

    def names(self) -> list[str]:
        return [name for name, _ in self.rules]

    def extended(self, name: str, rule: Rule) -> "ValidationRuleSet":
        return ValidationRuleSet(self.rules + ((name, rule),))


def check_completeness(p: Schedule, dag: WorkflowDAG, members: Iterable[NodeId]) -> bool:
    member_set = set(members)
    return (set(p.assignments) == set(dag.task_ids())
            and all(n in member_set for n in p.assignments.values()))


def check_level_preservation(p: Schedule, dag: WorkflowDAG) -> bool:
    if set(p.levels) != set(dag.task_ids()):
        return False
    if any(lvl < 0 for lvl in p.levels.values()):
        return False
    return all(p.levels[a] < p.levels[b] for a, b in dag.edges)


def check_feasibility(p: Schedule, dag: WorkflowDAG, resources: ResourceMap) -> bool:
    """Replay the assignment in generation order, debiting as it goes."""
    working = dict(resources.entries)
    order = sorted((p.levels.get(t, 0), t) for t in p.assignments)
    for _, task_id in order:
        node = p.assignments[task_id]
        if node not in working or not dag.has_task(task_id):
            return False
        task = dag.task(task_id)
        r = working[node]
        if task.cpu_req > r.cpu_avail or task.mem_req > r.mem_avail:
            return False
        working[node] = r.debit(task.cpu_req, task.mem_req)
    return True


def _entry_and_dag(p: Schedule, chain):
    entry = chain.schedule_table.get(p.request_id)
    if entry is None:
        return None, None
    return entry, chain.workflow_table.get(entry.workflow_id)


def _rule_proposer(p, chain, resources):
    entry, _ = _entry_and_dag(p, chain)
    return entry is not None and p.proposer == entry.designated


def _rule_completeness(p, chain, resources):
    _, dag = _entry_and_dag(p, chain)
    return dag is not None and check_completeness(p, dag, resources.nodes())


def _rule_levels(p, chain, resources):
    _, dag = _entry_and_dag(p, chain)
    return dag is not None and check_level_preservation(p, dag)


def _rule_feasibility(p, chain, resources):
    _, dag = _entry_and_dag(p, chain)
    return dag is not None and check_feasibility(p, dag, resources)


DEFAULT_RULES = ValidationRuleSet((
    ("proposer-is-designated", _rule_proposer),
    ("schedule-completeness", _rule_completeness),
    ("level-preservation", _rule_levels),
    ("resource-feasibility", _rule_feasibility),
))


def validate_schedule(p: Schedule, rules: ValidationRuleSet, chain, resources: ResourceMap) -> list[str]:
    """Names of the rules ``p`` fails, in rule order; empty means valid."""
    return [name for name, rule in rules.rules if not rule(p, chain, resources)]
