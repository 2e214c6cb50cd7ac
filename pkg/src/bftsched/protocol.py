"""Per-node orchestration of request admission, schedule generation,
confirmation and timeout-driven reassignment.

Every function here is a pure transition on a frozen :class:`ProtocolState`;
the caller (a simulated compute node) is responsible for broadcasting the
returned transactions and arming timers.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

from .crypto import DEFAULT_SIGNER, SignatureScheme
from .ledger import (
    ChainState,
    DataPayload,
    RequestId,
    ScheduleConfirmationPayload,
    ScheduleRequestPayload,
    ScheduleStatus,
    StatusPayload,
    Transaction,
    TxnKind,
    UnknownWorkflow,
    make_transaction,
)
from .scheduler import (
    DesignationWeights,
    ResourceMap,
    Schedule,
    ValidationRuleSet,
    WorkflowDAG,
    designate,
    generate_schedule,
    validate_schedule,
)

NodeId = str


class ValidationFailed(Exception):
    def __init__(self, rules: Sequence[str]):
        super().__init__(f"schedule failed validation: {', '.join(rules)}")
        self.rules = list(rules)


@dataclass(frozen=True)
class ScheduleRequest:
    request_id: RequestId
    source: NodeId
    workflow_id: str
    data_digest: str
    response_key: str
    persist_data: bool = False
    admitted_at: float = 0.0


@dataclass(frozen=True)
class ScheduleProposal:
    request_id: RequestId
    proposer: NodeId
    schedule: Schedule
    generated_at: float
    attempt: int = 1


@dataclass(frozen=True)
class PendingRequest:
    workflow_id: str
    source: NodeId
    designated: NodeId
    deadline: float
    attempt: int = 1


@dataclass(frozen=True)
class ProtocolState:
    node_id: NodeId
    failure_timeout_ms: float = 5000.0
    pending: Mapping[RequestId, PendingRequest] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pending", MappingProxyType(dict(self.pending)))

    def with_pending(self, rid: RequestId, entry: Optional[PendingRequest]) -> "ProtocolState":
        pending = dict(self.pending)
        if entry is None:
            pending.pop(rid, None)
        else:
            pending[rid] = entry
        return replace(self, pending=pending)


def admit_request(state: ProtocolState, req: ScheduleRequest, resources: ResourceMap,
                  weights: DesignationWeights, workflows: Mapping[str, WorkflowDAG],
                  members: Sequence[NodeId],
                  scheme: SignatureScheme = DEFAULT_SIGNER) -> tuple[ProtocolState, list[Transaction]]:
    """First phase: designate, then emit Data, Status(Requested) and ScheduleRequest."""
    if req.workflow_id not in workflows:
        raise UnknownWorkflow(f"workflow {req.workflow_id} is not registered")
    designated = designate(members, resources, weights)
    me = state.node_id
    rid = req.request_id
    txns = [
        make_transaction(TxnKind.DATA, DataPayload(req.data_digest, req.source, req.response_key,
                                                   req.persist_data), me, rid, scheme),
        make_transaction(TxnKind.STATUS, StatusPayload(ScheduleStatus.REQUESTED, 1), me, rid, scheme),
        make_transaction(TxnKind.SCHEDULE_REQUEST,
                         ScheduleRequestPayload(req.workflow_id, req.source, designated, resources, 1, ()),
                         me, rid, scheme),
    ]
    pending = PendingRequest(req.workflow_id, req.source, designated,
                             req.admitted_at + state.failure_timeout_ms, 1)
    return state.with_pending(rid, pending), txns


def build_proposal(node_id: NodeId, rid: RequestId, dag: WorkflowDAG, snapshot: ResourceMap,
                   rng: random.Random, now: float, attempt: int) -> ScheduleProposal:
    schedule = generate_schedule(dag, snapshot, rng, rid, node_id)
    return ScheduleProposal(rid, node_id, schedule, now, attempt)


def track_request(state: ProtocolState, txn: Transaction, now: float) -> ProtocolState:
    """Arm the failure deadline for a committed ScheduleRequest."""
    p: ScheduleRequestPayload = txn.payload
    return state.with_pending(txn.request_id, PendingRequest(p.workflow_id, p.source, p.designated,
                                                             now + state.failure_timeout_ms, p.attempt))


def on_schedule_request_event(state: ProtocolState, txn: Transaction, dag: WorkflowDAG,
                              rng: random.Random, now: float
                              ) -> tuple[ProtocolState, Optional[ScheduleProposal]]:
    """Second phase. Every node tracks the request; only the designee proposes.

    The schedule is generated against the snapshot recorded in the
    transaction, the same data validators will check it against.
    """
    p: ScheduleRequestPayload = txn.payload
    rid = txn.request_id
    state = track_request(state, txn, now)
    if state.node_id != p.designated:
        return state, None
    return state, build_proposal(state.node_id, rid, dag, p.snapshot, rng, now, p.attempt)


def confirmation_txns(proposal: ScheduleProposal, signer: NodeId,
                      scheme: SignatureScheme = DEFAULT_SIGNER) -> list[Transaction]:
    # the confirmation must be ordered before the Active acknowledgement
    rid = proposal.request_id
    return [
        make_transaction(TxnKind.SCHEDULE_CONFIRMATION,
                         ScheduleConfirmationPayload(proposal.schedule, proposal.proposer, proposal.attempt),
                         signer, rid, scheme),
        make_transaction(TxnKind.STATUS, StatusPayload(ScheduleStatus.ACTIVE, proposal.attempt),
                         signer, rid, scheme),
    ]


def confirm_schedule(state: ProtocolState, proposal: ScheduleProposal, rules: ValidationRuleSet,
                     chain: ChainState, resources: ResourceMap,
                     scheme: SignatureScheme = DEFAULT_SIGNER) -> list[Transaction]:
    """Third phase: local validation, then the transactions to order.

    Raises :class:`ValidationFailed`; the caller leaves the request's timer
    running so reassignment still fires.
    """
    failed = validate_schedule(proposal.schedule, rules, chain, resources)
    if failed:
        raise ValidationFailed(failed)
    return confirmation_txns(proposal, state.node_id, scheme)


def timeout_submitters(members: Sequence[NodeId], designated: NodeId, f: int) -> list[NodeId]:
    """The first f+1 members other than the expired designee; at least one is honest."""
    return [m for m in members if m != designated][: f + 1]


def on_timeout(state: ProtocolState, rid: RequestId, now: float, chain: ChainState,
               weights: DesignationWeights, scheme: SignatureScheme = DEFAULT_SIGNER,
               submit: bool = True) -> tuple[ProtocolState, list[Transaction]]:
    """Expire the current attempt and re-designate, excluding earlier designees.

    Nodes in the exclusion set include those the ledger flagged for
    unauthorized or duplicate confirmations. After as many attempts as there
    are members, or once no candidate remains, the request fails for good.
    A no-op unless the recorded status is still Requested at the pending
    attempt and the deadline has passed.
    """
    pend = state.pending.get(rid)
    entry = chain.schedule_table.get(rid)
    if pend is None or entry is None:
        return state, []
    if entry.status is not ScheduleStatus.REQUESTED or entry.attempt != pend.attempt:
        return state.with_pending(rid, None), []
    if now < pend.deadline:
        return state, []
    members = chain.genesis.members
    excluded = set(entry.excluded) | {entry.designated} | (set(chain.flagged) & set(members))
    candidates = [m for m in members if m not in excluded]
    attempt = entry.attempt
    if attempt >= len(members) or not candidates:
        txns = [make_transaction(TxnKind.STATUS, StatusPayload(ScheduleStatus.FAILED, attempt, True),
                                 state.node_id, rid, scheme)]
        return state.with_pending(rid, None), (txns if submit else [])
    designee = designate(candidates, entry.snapshot, weights)
    txns = [
        make_transaction(TxnKind.STATUS, StatusPayload(ScheduleStatus.FAILED, attempt), state.node_id, rid, scheme),
        make_transaction(TxnKind.SCHEDULE_REQUEST,
                         ScheduleRequestPayload(entry.workflow_id, entry.source, designee, entry.snapshot,
                                                attempt + 1, tuple(m for m in members if m in excluded)),
                         state.node_id, rid, scheme),
    ]
    rearmed = PendingRequest(entry.workflow_id, entry.source, designee, now + state.failure_timeout_ms,
                             attempt + 1)
    return state.with_pending(rid, rearmed), (txns if submit else [])
