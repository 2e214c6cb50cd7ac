"""Simulated actors: compute nodes, IoT sources, the data service and the
workflow-registration client, plus the :class:`Deployment` that wires them
onto one :class:`~bftsched.simnet.Simulator`.

Every network message goes through the latency model, including a node's
messages to itself, so timing does not depend on where tasks land.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple, Optional

from .crypto import DEFAULT_SIGNER, SignatureScheme, digest_record
from .datastores import (
    COMPLETION_CHANNEL,
    SCHEDULE_CHANNEL,
    CacheCluster,
    Missing,
    PersistentStore,
    ResourceRegistrar,
    input_key,
    resource_key,
    resource_record_bytes,
)
from .executor import (
    CompletionNotice,
    Executor,
    UnknownTask,
    WorkflowResult,
    complete_task,
    finalize_workflow,
    on_completion_notice,
    on_schedule_published,
    start_run,
    synthetic_output,
)
from .ledger import (
    ChainState,
    GenesisConfig,
    LedgerError,
    ResourceBatchPayload,
    ScheduleStatus,
    Transaction,
    TxnKind,
    WorkflowDefinitionPayload,
    append_block,
    genesis_state,
    make_transaction,
    new_request_id,
)
from .pbft import ClusterConfig, ConsensusMessage, Replica
from .protocol import (
    ProtocolState,
    ScheduleRequest,
    ValidationFailed,
    admit_request,
    build_proposal,
    confirm_schedule,
    confirmation_txns,
    on_schedule_request_event,
    on_timeout,
    timeout_submitters,
    track_request,
)
from .scheduler import DEFAULT_RULES, ResourceState, SchedulerError, Schedule, WorkflowDAG
from .simnet import ByzantineScenario, FaultPlan, LatencyModel, Simulator, sample_latency

CACHE = "cache"
ADMIN = "admin"


class Envelope(NamedTuple):
    src: str
    sent_at: float
    body: Any


# -- message bodies ---------------------------------------------------------------

@dataclass(frozen=True)
class TxnBatch:
    txns: tuple[Transaction, ...]


@dataclass(frozen=True)
class ClientRequest:
    request_id: str
    source: str
    workflow_id: str
    data_digest: str
    response_key: str
    persist_data: bool = False


@dataclass(frozen=True)
class CachePut:
    key: str
    value: Any


@dataclass(frozen=True)
class CachePutPublish:
    """Write then publish in one message so the notice cannot overtake the value."""

    key: str
    value: Any
    channel: str
    message: Any


@dataclass(frozen=True)
class CacheGet:
    key: str
    token: Any


@dataclass(frozen=True)
class CacheValue:
    key: str
    value: Any
    token: Any


@dataclass(frozen=True)
class ResourceViewRequest:
    token: Any


@dataclass(frozen=True)
class ResourceView:
    view: Any
    token: Any


@dataclass(frozen=True)
class ResourceUpdate:
    node: str
    state: ResourceState
    record: bytes


@dataclass(frozen=True)
class ChannelMessage:
    channel: str
    message: Any


@dataclass(frozen=True)
class ScheduleNotice:
    schedule: Schedule
    workflow_id: str
    attempt: int


@dataclass(frozen=True)
class ResultDelivery:
    result: WorkflowResult


# -- deployment ---------------------------------------------------------------------

@dataclass(frozen=True)
class NodeParams:
    view_timeout_ms: float = 2000.0
    processing_ms: float = 0.02
    batch_window_ms: float = 0.0
    resource_interval_ms: float = 10_000.0
    trace_messages: bool = True


class Deployment:
    def __init__(self, sim: Simulator, latency: LatencyModel, genesis: GenesisConfig,
                 params: NodeParams = NodeParams(), scheme: SignatureScheme = DEFAULT_SIGNER):
        self.sim = sim
        self.latency = latency
        self.genesis = genesis
        self.params = params
        self.scheme = scheme
        self.members = genesis.members
        self.classes: dict[str, str] = {CACHE: "cache", ADMIN: "compute"}
        self.compute: dict[str, ComputeNode] = {}
        self.iot: dict[str, IoTNode] = {}
        self.data = DataService(self)
        self.sim.register(CACHE, self.data.handle)
        self.fault_plan = FaultPlan()

    def add_compute(self, node_id: str, base: ResourceState) -> "ComputeNode":
        node = ComputeNode(self, node_id, base)
        self.compute[node_id] = node
        self.classes[node_id] = "compute"
        self.sim.register(node_id, node.handle)
        self.data.cache.subscribe(SCHEDULE_CHANNEL, node_id)
        self.data.cache.subscribe(COMPLETION_CHANNEL, node_id)
        self.data.cache.put(resource_key(node_id), base)
        return node

    def add_iot(self, node_id: str, gateway: str) -> "IoTNode":
        node = IoTNode(self, node_id, gateway)
        self.iot[node_id] = node
        self.classes[node_id] = "iot"
        self.sim.register(node_id, node.handle)
        return node

    def add_admin(self, workflows: list[WorkflowDAG]) -> None:
        txns = tuple(make_transaction(TxnKind.WORKFLOW_DEFINITION, WorkflowDefinitionPayload(dag), ADMIN,
                                      None, self.scheme) for dag in workflows)
        self.sim.register(ADMIN, lambda payload: None)
        t = self.sim.now
        self.sim.trace.record(t, ADMIN, "workflows", [dag.workflow_id for dag in workflows])
        for m in self.members:
            self.send(ADMIN, m, TxnBatch(txns))

    def set_faults(self, plan: FaultPlan) -> None:
        self.fault_plan = plan
        for node in self.compute.values():
            node.byzantine = plan.scenario(node.node_id)

    def send(self, src: str, dst: str, body: Any, extra: float = 0.0) -> None:
        sim = self.sim
        classes = self.classes
        delay = sample_latency(self.latency, classes[src], classes[dst], sim.rng)
        sim.schedule_after(extra + delay, dst, Envelope(src, sim.now + extra, body))

    def broadcast(self, src: str, dsts, body: Any, extra: float = 0.0) -> None:
        """Same as calling :meth:`send` per destination, with one shared envelope."""
        sim = self.sim
        classes, latency, rng = self.classes, self.latency, sim.rng
        src_class = classes[src]
        env = Envelope(src, sim.now + extra, body)
        for dst in dsts:
            sim.schedule_after(extra + sample_latency(latency, src_class, classes[dst], rng), dst, env)


class DataService:
    """Cache cluster and persistent store behind one network address."""

    def __init__(self, dep: Deployment):
        self.dep = dep
        self.cache = CacheCluster()
        self.store = PersistentStore()

    def handle(self, env: Envelope) -> None:
        dep = self.dep
        body = env.body
        if isinstance(body, CachePutPublish):
            self.cache.put(body.key, body.value)
            msg = ChannelMessage(body.channel, body.message)
            self.cache.publish(body.channel, msg, lambda node, m: dep.send(CACHE, node, m))
        elif isinstance(body, CacheGet):
            try:
                value = self.cache.get(body.key)
            except Missing:
                value = None
            dep.send(CACHE, env.src, CacheValue(body.key, value, body.token))
        elif isinstance(body, ResourceViewRequest):
            try:
                view = self.cache.resource_view(dep.members, dep.sim.now)
            except Missing:
                view = None
            dep.send(CACHE, env.src, ResourceView(view, body.token))
        elif isinstance(body, ResourceUpdate):
            self.cache.put(resource_key(body.node), body.state)
            self.store.append(dep.sim.now, body.node, body.record)
        elif isinstance(body, CachePut):
            self.cache.put(body.key, body.value)


class IoTNode:
    def __init__(self, dep: Deployment, node_id: str, gateway: str):
        self.dep = dep
        self.node_id = node_id
        self.gateway = gateway
        self.results: list[WorkflowResult] = []

    def schedule_request(self, at_ms: float, workflow_id: str, index: int, persist_data: bool = False) -> None:
        self.dep.sim.schedule_after(at_ms - self.dep.sim.now, self.node_id,
                                    ("send", workflow_id, index, persist_data))

    def handle(self, payload) -> None:
        dep = self.dep
        now = dep.sim.now
        if isinstance(payload, Envelope):
            body = payload.body
            if isinstance(body, ResultDelivery):
                r = body.result
                self.results.append(r)
                dep.sim.trace.record(now, self.node_id, "result_delivered",
                                     {"rid": r.request_id, "output_key": r.final_output_key,
                                      "encrypted_with": r.encrypted_with, "from": payload.src})
            return
        _, workflow_id, index, persist = payload
        rid = new_request_id(dep.sim.rng)
        response_key = f"rk-{self.node_id}-{index}"
        data_digest = digest_record({"source": self.node_id, "index": index, "rid": rid})
        dep.sim.trace.record(now, self.node_id, "request_sent",
                             {"rid": rid, "gateway": self.gateway, "workflow_id": workflow_id,
                              "index": index, "response_key": response_key})
        dep.send(self.node_id, self.gateway,
                 ClientRequest(rid, self.node_id, workflow_id, data_digest, response_key, persist))


class ComputeNode:
    def __init__(self, dep: Deployment, node_id: str, base: ResourceState):
        self.dep = dep
        self.sim = dep.sim
        self.trace = dep.sim.trace
        self.node_id = node_id
        self.base = base
        g = dep.genesis
        p = dep.params
        self.params = p
        self.scheme = dep.scheme
        self.others = tuple(m for m in g.members if m != node_id)
        self.replica = Replica(node_id, ClusterConfig(g.members, g.f), dep.scheme, p.view_timeout_ms, g.digest)
        self.chain: ChainState = genesis_state(g)
        self.protocol = ProtocolState(node_id, g.failure_timeout_ms)
        self.executor = Executor(node_id)
        self.registrar = ResourceRegistrar(p.resource_interval_ms, g.batch_size)
        self.byzantine: Optional[ByzantineScenario] = None
        self.release = 0.0
        self.busy_until = 0.0
        self.propose_pending = False
        self.timer_armed: Optional[float] = None
        self.last_active: Optional[str] = None
        self.pending_results: dict[str, WorkflowResult] = {}
        self.admissions: dict[str, ClientRequest] = {}
        self.fetching: dict[tuple[str, str], int] = {}
        self.early_schedules: dict[str, ScheduleNotice] = {}
        self.early_notices: dict[str, list[CompletionNotice]] = {}
        self.registrar_until = float("inf")

    # -- plumbing ----------------------------------------------------------

    def clock(self) -> float:
        return self.sim.now + self.release

    def record(self, kind: str, detail: Any = None) -> None:
        self.trace.record(self.sim.now + self.release, self.node_id, kind, detail)

    def send(self, dst: str, body: Any) -> None:
        self.dep.send(self.node_id, dst, body, self.release)

    def later(self, delay: float, payload: Any) -> None:
        self.sim.schedule_after(self.release + delay, self.node_id, payload)

    def submit(self, txns: list[Transaction]) -> None:
        batch = TxnBatch(tuple(txns))
        for m in self.dep.members:
            self.send(m, batch)

    def current_resources(self) -> ResourceState:
        b = self.base
        cpu, mem = b.cpu_used, b.mem_used
        for run in self.executor.running():
            task = self.executor.views[run.request_id].dag.task(run.task_id)
            cpu += task.cpu_req
            mem += task.mem_req
        return ResourceState(b.cpu_total, min(cpu, b.cpu_total), b.mem_total, min(mem, b.mem_total))

    # -- dispatch ------------------------------------------------------------

    def handle(self, payload) -> None:
        self.release = 0.0
        if not isinstance(payload, Envelope):
            self._on_timer(payload)
            return
        body = payload.body
        if isinstance(body, (ConsensusMessage, TxnBatch)):
            cost = self.params.processing_ms
            if cost:
                now = self.sim.now
                start = self.busy_until if self.busy_until > now else now
                self.busy_until = start + cost
                self.release = self.busy_until - now
        if self.params.trace_messages:
            detail = {"type": type(body).__name__, "from": payload.src, "sent": payload.sent_at}
            if isinstance(body, ConsensusMessage):
                detail["phase"] = body.phase.value
                detail["view"] = body.view
                detail["seq"] = body.sequence
            self.trace.record(self.sim.now, self.node_id, "recv", detail)
        if isinstance(body, ConsensusMessage):
            self._consensus(self.replica.handle_message(body, self.clock()))
        elif isinstance(body, TxnBatch):
            self.replica.submit(body.txns, self.clock())
            self._after_replica()
        elif isinstance(body, ChannelMessage):
            self._on_channel(body)
        elif isinstance(body, CacheValue):
            self._on_input(body)
        elif isinstance(body, ClientRequest):
            self.admissions[body.request_id] = body
            self.send(CACHE, ResourceViewRequest(body.request_id))
        elif isinstance(body, ResourceView):
            self._admit(body)

    def _on_timer(self, payload) -> None:
        kind = payload[0]
        if kind == "propose":
            self.propose_pending = False
            if self.replica.wants_proposal:
                self._consensus(self.replica.propose(self.clock()))
        elif kind == "view_timer":
            if self.timer_armed == payload[1]:
                self.timer_armed = None
            out, committed = self.replica.on_timer(self.clock())
            if out:
                self.record("view_change", {"target": out[0].view})
            self._consensus((out, committed))
        elif kind == "deadline":
            self._on_deadline(payload[1], payload[2])
        elif kind == "task_done":
            self._on_task_done(payload[1], payload[2])
        elif kind == "registrar":
            self._on_registrar()

    # -- consensus -----------------------------------------------------------

    def _consensus(self, result) -> None:
        out, committed = result
        for msg in out:
            self.dep.broadcast(self.node_id, self.others, msg, self.release)
        for block in committed:
            self._on_block(block)
        self._after_replica()

    def _after_replica(self) -> None:
        r = self.replica
        if not self.propose_pending and r.wants_proposal:
            self.propose_pending = True
            self.later(self.params.batch_window_ms, ("propose",))
        d = r.timer_deadline
        if d is not None and d != self.timer_armed:
            self.timer_armed = d
            self.sim.schedule_after(max(0.0, d - self.sim.now), self.node_id, ("view_timer", d))

    def _on_block(self, block) -> None:
        try:
            self.chain, verdicts = append_block(self.chain, block, self.scheme)
        except LedgerError as exc:
            self.record("block_rejected", {"height": block.height, "error": exc.code})
            return
        self.record("block", {"height": block.height, "digest": block.digest, "txns": len(block.transactions)})
        for v, txn in zip(verdicts, block.transactions):
            detail = {"h": v.block_height, "i": v.txn_index, "kind": v.kind.value, "rid": v.request_id,
                      "signer": v.signer, "txn": v.txn_digest, "error": v.error}
            if v.accepted:
                if txn.kind is TxnKind.SCHEDULE_REQUEST:
                    detail["designated"] = txn.payload.designated
                    detail["attempt"] = txn.payload.attempt
                elif txn.kind is TxnKind.SCHEDULE_CONFIRMATION:
                    detail["proposer"] = txn.payload.proposer
                    detail["attempt"] = txn.payload.attempt
                    detail["schedule"] = digest_record(txn.payload.schedule.to_record())
                elif txn.kind is TxnKind.STATUS:
                    detail["status"] = txn.payload.status.value
                    detail["attempt"] = txn.payload.attempt
                    detail["final"] = txn.payload.final
            self.record("verdict", detail)
            if v.accepted:
                self._on_accepted(txn)

    def _on_accepted(self, txn: Transaction) -> None:
        kind = txn.kind
        if kind is TxnKind.SCHEDULE_REQUEST:
            self._on_schedule_request(txn)
        elif kind is TxnKind.SCHEDULE_CONFIRMATION:
            rid = txn.request_id
            self.protocol = self.protocol.with_pending(rid, None)
            self.last_active = rid
            if txn.signer == self.node_id:
                sched = txn.payload.schedule
                entry = self.chain.schedule_table[rid]
                notice = ScheduleNotice(sched, entry.workflow_id, txn.payload.attempt)
                self.send(CACHE, CachePutPublish(f"schedule/{rid}", sched, SCHEDULE_CHANNEL, notice))
            early = self.early_schedules.pop(rid, None)
            if early is not None:
                self._start_schedule(early)
        elif kind is TxnKind.STATUS and txn.payload.status is ScheduleStatus.FINALIZED:
            result = self.pending_results.pop(txn.request_id, None)
            if result is not None:
                self.send(result.delivered_to, ResultDelivery(result))
                self.record("result_sent", {"rid": txn.request_id, "to": result.delivered_to})

    # -- scheduling protocol ---------------------------------------------------

    def _admit(self, body: ResourceView) -> None:
        req = self.admissions.pop(body.token, None)
        if req is None:
            return
        if body.view is None:
            self.record("admission_rejected", {"rid": req.request_id, "error": "Missing"})
            return
        sreq = ScheduleRequest(req.request_id, req.source, req.workflow_id, req.data_digest,
                               req.response_key, req.persist_data, self.clock())
        try:
            g = self.chain.genesis
            self.protocol, txns = admit_request(self.protocol, sreq, body.view, g.weights,
                                                self.chain.workflow_table, g.members, self.scheme)
        except (LedgerError, SchedulerError) as exc:
            self.record("admission_rejected", {"rid": req.request_id, "error": type(exc).__name__})
            return
        self.record("admitted", {"rid": req.request_id, "designated": txns[2].payload.designated})
        self.send(CACHE, CachePut(input_key(req.request_id), req.data_digest))
        self.submit(txns)

    def _propose_honestly(self, proposal) -> None:
        try:
            txns = confirm_schedule(self.protocol, proposal, DEFAULT_RULES, self.chain,
                                    self.chain.schedule_table[proposal.request_id].snapshot, self.scheme)
        except ValidationFailed as exc:
            self.record("validation_failed", {"rid": proposal.request_id, "rules": exc.rules})
            return
        self._record_proposal(proposal.request_id, proposal.attempt, txns[0], False,
                              proposal.request_id, proposal.attempt)
        self.submit(txns)

    def _record_proposal(self, target: str, attempt: int, txn: Transaction, malicious: bool,
                         trigger_rid: str, trigger_attempt: int) -> None:
        self.record("proposal", {"rid": target, "attempt": attempt, "txn": txn.digest, "malicious": malicious,
                                 "trigger": [trigger_rid, trigger_attempt]})

    def _forge(self, target: str, trigger_rid: str, trigger_attempt: int) -> None:
        entry = self.chain.schedule_table[target]
        dag = self.chain.workflow_table[entry.workflow_id]
        try:
            proposal = build_proposal(self.node_id, target, dag, entry.snapshot, self.sim.rng,
                                      self.clock(), entry.attempt)
        except SchedulerError:
            return
        txns = confirmation_txns(proposal, self.node_id, self.scheme)
        self._record_proposal(target, entry.attempt, txns[0], True, trigger_rid, trigger_attempt)
        self.submit(txns)

    def _on_schedule_request(self, txn: Transaction) -> None:
        p = txn.payload
        rid = txn.request_id
        dag = self.chain.workflow_table[p.workflow_id]
        designated = p.designated == self.node_id
        withhold = designated and self.byzantine is not None and self.dep.fault_plan.withhold_designated
        now = self.clock()
        if withhold:
            # a silent designee: track the request but do not generate
            self.protocol = track_request(self.protocol, txn, now)
            self.record("withheld", {"rid": rid, "attempt": p.attempt})
        else:
            try:
                self.protocol, proposal = on_schedule_request_event(self.protocol, txn, dag, self.sim.rng, now)
            except SchedulerError as exc:
                self.record("generation_failed", {"rid": rid, "error": type(exc).__name__})
                proposal = None
            if proposal is not None:
                self._propose_honestly(proposal)
        self.later(self.protocol.failure_timeout_ms, ("deadline", rid, p.attempt))
        if self.byzantine is ByzantineScenario.UNAUTHORIZED_PROPOSER and not designated:
            self._forge(rid, rid, p.attempt)
        elif self.byzantine is ByzantineScenario.REQUEST_INTERFERENCE and designated:
            target = self.last_active
            if target is not None and target != rid:
                self._forge(target, rid, p.attempt)

    def _on_deadline(self, rid: str, attempt: int) -> None:
        pend = self.protocol.pending.get(rid)
        if pend is None or pend.attempt != attempt:
            return
        submit = self.node_id in timeout_submitters(self.dep.members, pend.designated, self.dep.genesis.f)
        self.protocol, txns = on_timeout(self.protocol, rid, self.clock(), self.chain,
                                         self.dep.genesis.weights, self.scheme, submit)
        self.record("timeout", {"rid": rid, "attempt": attempt, "submit": bool(txns)})
        if txns:
            self.submit(txns)

    # -- execution -------------------------------------------------------------

    def _on_channel(self, body: ChannelMessage) -> None:
        msg = body.message
        if body.channel == SCHEDULE_CHANNEL:
            rid = msg.schedule.request_id
            entry = self.chain.schedule_table.get(rid)
            if entry is not None and entry.schedule is not None and entry.schedule == msg.schedule:
                self._start_schedule(msg)
            else:
                # not yet committed locally; start once the confirmation applies
                self.early_schedules[rid] = msg
        elif body.channel == COMPLETION_CHANNEL:
            self._on_notice(msg)

    def _start_schedule(self, notice: ScheduleNotice) -> None:
        sched = notice.schedule
        rid = sched.request_id
        dag = self.chain.workflow_table[notice.workflow_id]
        data = self.chain.data_table.get(rid)
        entry = self.chain.schedule_table[rid]
        response_key = data.response_key if data is not None else ""
        started = on_schedule_published(self.executor, sched, dag, entry.source, response_key,
                                        notice.attempt, self.clock())
        for run in started:
            self._begin(run)
        for n in self.early_notices.pop(rid, []):
            self._on_notice(n)

    def _begin(self, run) -> None:
        self.record("task_start", {"rid": run.request_id, "task": run.task_id, "ready": run.ready_at})
        self.later(run.exec_duration, ("task_done", run.request_id, run.task_id))

    def _fetch_inputs(self, runs) -> None:
        for run in runs:
            view = self.executor.views[run.request_id]
            preds = view.dag.predecessors(run.task_id)
            self.record("task_ready", {"rid": run.request_id, "task": run.task_id})
            if not preds:
                self._begin(start_run(run, self.clock()))
                continue
            self.fetching[(run.request_id, run.task_id)] = len(preds)
            for pred in preds:
                self.send(CACHE, CacheGet(f"output/{run.request_id}/{pred}", (run.request_id, run.task_id)))

    def _on_input(self, body: CacheValue) -> None:
        token = body.token
        left = self.fetching.get(token)
        if left is None:
            return
        if left > 1:
            self.fetching[token] = left - 1
            return
        del self.fetching[token]
        rid, task_id = token
        run = self.executor.views[rid].runs[task_id]
        self._begin(start_run(run, self.clock()))

    def _on_notice(self, notice: CompletionNotice) -> None:
        if notice.node == self.node_id:
            return  # own completions were applied locally
        try:
            ready = on_completion_notice(self.executor, notice, self.clock())
        except UnknownTask:
            self.record("unknown_notice", {"rid": notice.request_id, "task": notice.task_id})
            self.early_notices.setdefault(notice.request_id, []).append(notice)
            return
        self._fetch_inputs(ready)
        self._check_finalize(notice.request_id)

    def _on_task_done(self, rid: str, task_id: str) -> None:
        notice, ready = complete_task(self.executor, rid, task_id, self.clock())
        self.record("task_done", {"rid": rid, "task": task_id})
        self.send(CACHE, CachePutPublish(notice.output_key, synthetic_output(rid, task_id),
                                         COMPLETION_CHANNEL, notice))
        self._fetch_inputs(ready)
        self._check_finalize(rid)

    def _check_finalize(self, rid: str) -> None:
        res = finalize_workflow(self.executor, rid, self.clock(), self.scheme)
        if res is None:
            return
        txn, result = res
        self.pending_results[rid] = result
        self.record("finalize", {"rid": rid, "output_key": result.final_output_key})
        self.submit([txn])

    # -- resources ----------------------------------------------------------------

    def start_registrar(self, offset_ms: float, until_ms: float) -> None:
        self.registrar_until = until_ms
        if offset_ms <= until_ms:
            self.sim.schedule_after(offset_ms, self.node_id, ("registrar",))

    def _on_registrar(self) -> None:
        now = self.clock()
        r = self.current_resources()
        record = resource_record_bytes(self.node_id, r, now)
        batch = self.registrar.tick(self.node_id, r, now, None, None)
        self.send(CACHE, ResourceUpdate(self.node_id, r, record))
        if batch is not None:
            self.record("resource_batch", {"digests": len(batch)})
            self.submit([make_transaction(TxnKind.RESOURCE_BATCH, ResourceBatchPayload(batch),
                                          self.node_id, None, self.scheme)])
        nxt = now + self.registrar.interval
        if nxt <= self.registrar_until:
            self.later(self.registrar.interval, ("registrar",))

