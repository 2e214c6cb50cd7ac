"""Replicated append-only ledger and schedule-lifecycle rules.

``ChainState`` is an immutable value. ``apply_transaction`` and
``append_block`` return new states, so replaying the same blocks from the
same genesis always folds to an equal state.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from types import MappingProxyType
from typing import Any, Iterable, Mapping, NewType, Optional, Sequence

from .crypto import DEFAULT_SIGNER, SignatureScheme, digest_bytes, digest_record
from .scheduler import (
    DesignationWeights,
    ResourceMap,
    Schedule,
    SchedulerError,
    WorkflowDAG,
    check_completeness,
    check_feasibility,
    check_level_preservation,
    compute_levels,
    designate,
)

NodeId = str
RequestId = NewType("RequestId", str)


def new_request_id(rng) -> RequestId:
    """128-bit identifier rendered as 32 lowercase hex digits."""
    return RequestId(f"{rng.getrandbits(128):032x}")


# -- errors -------------------------------------------------------------------

class LedgerError(Exception):
    code = "LedgerError"


class DuplicateConfirmation(LedgerError):
    code = "DuplicateConfirmation"


class UnauthorizedProposer(LedgerError):
    code = "UnauthorizedProposer"


class IllegalTransition(LedgerError):
    code = "IllegalTransition"


class UnknownRequest(LedgerError):
    code = "UnknownRequest"


class UnknownWorkflow(LedgerError):
    code = "UnknownWorkflow"


class InvalidDesignation(LedgerError):
    code = "InvalidDesignation"


class InvalidSchedule(LedgerError):
    code = "InvalidSchedule"


class MalformedTransaction(LedgerError):
    code = "MalformedTransaction"


class WrongBatchSize(LedgerError):
    code = "WrongBatchSize"


class BadParent(LedgerError):
    code = "BadParent"


class InsufficientQuorum(LedgerError):
    code = "InsufficientQuorum"


# -- transactions ---------------------------------------------------------------

class TxnKind(str, enum.Enum):
    DATA = "Data"
    STATUS = "Status"
    SCHEDULE_REQUEST = "ScheduleRequest"
    SCHEDULE_CONFIRMATION = "ScheduleConfirmation"
    RESOURCE_BATCH = "ResourceBatch"
    WORKFLOW_DEFINITION = "WorkflowDefinition"


class ScheduleStatus(str, enum.Enum):
    REQUESTED = "Requested"
    ACTIVE = "Active"
    FINALIZED = "Finalized"
    FAILED = "Failed"


ALLOWED_TRANSITIONS = frozenset({
    (ScheduleStatus.REQUESTED, ScheduleStatus.ACTIVE),
    (ScheduleStatus.ACTIVE, ScheduleStatus.FINALIZED),
    (ScheduleStatus.REQUESTED, ScheduleStatus.FAILED),
    (ScheduleStatus.ACTIVE, ScheduleStatus.FAILED),
})


def is_legal_transition(old: ScheduleStatus, new: ScheduleStatus) -> bool:
    return (old, new) in ALLOWED_TRANSITIONS


@dataclass(frozen=True)
class DataPayload:
    data_digest: str
    source: NodeId
    response_key: str
    persist_data: bool = False

    def to_record(self) -> dict:
        return {"data_digest": self.data_digest, "source": self.source,
                "response_key": self.response_key, "persist_data": self.persist_data}


@dataclass(frozen=True)
class StatusPayload:
    status: ScheduleStatus
    attempt: int = 1
    final: bool = False  # only meaningful with Failed: no further reassignment

    def to_record(self) -> dict:
        return {"status": self.status.value, "attempt": self.attempt, "final": self.final}


@dataclass(frozen=True)
class ScheduleRequestPayload:
    workflow_id: str
    source: NodeId
    designated: NodeId
    snapshot: ResourceMap
    attempt: int = 1
    excluded: tuple[NodeId, ...] = ()

    @property
    def snapshot_digest(self) -> str:
        return self.snapshot.digest()

    def to_record(self) -> dict:
        return {"workflow_id": self.workflow_id, "source": self.source,
                "designated": self.designated, "snapshot_digest": self.snapshot_digest,
                "snapshot": self.snapshot.to_record(), "attempt": self.attempt,
                "excluded": list(self.excluded)}


@dataclass(frozen=True)
class ScheduleConfirmationPayload:
    schedule: Schedule
    proposer: NodeId
    attempt: int = 1

    def to_record(self) -> dict:
        return {"schedule": self.schedule.to_record(), "proposer": self.proposer,
                "attempt": self.attempt}


@dataclass(frozen=True)
class ResourceBatchPayload:
    digests: tuple[str, ...]

    def to_record(self) -> dict:
        return {"digests": list(self.digests)}


@dataclass(frozen=True)
class WorkflowDefinitionPayload:
    dag: WorkflowDAG

    def to_record(self) -> dict:
        return {"dag": self.dag.to_document()}


Payload = (DataPayload | StatusPayload | ScheduleRequestPayload | ScheduleConfirmationPayload
           | ResourceBatchPayload | WorkflowDefinitionPayload)

_PAYLOAD_TYPES = {
    TxnKind.DATA: DataPayload,
    TxnKind.STATUS: StatusPayload,
    TxnKind.SCHEDULE_REQUEST: ScheduleRequestPayload,
    TxnKind.SCHEDULE_CONFIRMATION: ScheduleConfirmationPayload,
    TxnKind.RESOURCE_BATCH: ResourceBatchPayload,
    TxnKind.WORKFLOW_DEFINITION: WorkflowDefinitionPayload,
}


@dataclass(frozen=True, eq=False)
class Transaction:
    kind: TxnKind
    request_id: Optional[RequestId]
    payload: Payload
    signer: NodeId
    signature: bytes = b""

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Transaction) and self.digest == other.digest and self.signature == other.signature

    def __hash__(self) -> int:
        return hash(self.digest)

    def body_record(self) -> dict:
        return {"kind": self.kind.value, "request_id": self.request_id,
                "payload": self.payload.to_record(), "signer": self.signer}

    @cached_property
    def digest(self) -> str:
        return digest_record(self.body_record())

    def to_record(self) -> dict:
        rec = self.body_record()
        rec["signature"] = self.signature.hex()
        return rec


def make_transaction(kind: TxnKind, payload: Payload, signer: NodeId,
                     request_id: Optional[str] = None,
                     scheme: SignatureScheme = DEFAULT_SIGNER) -> Transaction:
    if not isinstance(payload, _PAYLOAD_TYPES[kind]):
        raise MalformedTransaction(f"{kind.value} cannot carry {type(payload).__name__}")
    txn = Transaction(kind, RequestId(request_id) if request_id is not None else None, payload, signer)
    return replace(txn, signature=scheme.sign(signer, txn.digest.encode()))


# -- blocks -----------------------------------------------------------------------

@dataclass(frozen=True)
class QuorumCertificate:
    """Signed commit votes over (view, sequence, block digest)."""

    view: int
    sequence: int
    block_digest: str
    votes: tuple[tuple[NodeId, bytes], ...]

    def signers(self) -> set[NodeId]:
        return {s for s, _ in self.votes}


def commit_signing_bytes(view: int, sequence: int, block_digest: str) -> bytes:
    return f"Commit|{view}|{sequence}|{block_digest}".encode()


@dataclass(frozen=True, eq=False)
class Block:
    height: int
    parent_digest: str
    transactions: tuple[Transaction, ...]
    consensus_proof: Optional[QuorumCertificate] = None

    @cached_property
    def digest(self) -> str:
        # proof is excluded: it certifies the digest
        parts = [str(self.height), self.parent_digest] + [t.digest for t in self.transactions]
        return digest_bytes("|".join(parts).encode())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Block) and self.digest == other.digest

    def __hash__(self) -> int:
        return hash(self.digest)


@dataclass(frozen=True)
class GenesisConfig:
    """Membership and protocol parameters every replica folds identically."""

    members: tuple[NodeId, ...]
    f: int
    batch_size: int = 10
    failure_timeout_ms: float = 5000.0
    weights: DesignationWeights = DesignationWeights()

    def __post_init__(self):
        if len(self.members) < 3 * self.f + 1:
            raise ValueError(f"{len(self.members)} members cannot tolerate f={self.f}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_record(self) -> dict:
        return {"members": list(self.members), "f": self.f, "batch_size": self.batch_size,
                "failure_timeout_ms": self.failure_timeout_ms,
                "weights": [self.weights.w_c, self.weights.w_m]}

    @property
    def digest(self) -> str:
        return digest_record(self.to_record())

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1


@dataclass(frozen=True)
class ScheduleEntry:
    workflow_id: str
    source: NodeId
    designated: NodeId
    snapshot: ResourceMap
    attempt: int = 1
    excluded: tuple[NodeId, ...] = ()
    status: ScheduleStatus = ScheduleStatus.REQUESTED
    schedule: Optional[Schedule] = None
    final: bool = False
    # (attempt, status) pairs in application order
    history: tuple[tuple[int, ScheduleStatus], ...] = ()


@dataclass(frozen=True, eq=False)
class ChainState:
    genesis: GenesisConfig
    blocks: tuple[Block, ...] = ()
    schedule_table: Mapping[RequestId, ScheduleEntry] = field(default_factory=dict)
    workflow_table: Mapping[str, WorkflowDAG] = field(default_factory=dict)
    data_table: Mapping[RequestId, DataPayload] = field(default_factory=dict)
    resource_digest_log: tuple[str, ...] = ()
    # signers whose schedule confirmations were rejected as unauthorized or duplicate
    flagged: frozenset[NodeId] = frozenset()

    def __post_init__(self):
        for name in ("schedule_table", "workflow_table", "data_table"):
            object.__setattr__(self, name, MappingProxyType(dict(getattr(self, name))))

    @property
    def height(self) -> int:
        return self.blocks[-1].height if self.blocks else 0

    @property
    def head_digest(self) -> str:
        return self.blocks[-1].digest if self.blocks else self.genesis.digest

    def fingerprint(self) -> str:
        """Digest over everything the transaction fold produces."""
        return digest_record({
            "genesis": self.genesis.digest,
            "blocks": [b.digest for b in self.blocks],
            "schedules": {rid: _entry_record(e) for rid, e in sorted(self.schedule_table.items())},
            "workflows": sorted(self.workflow_table),
            "data": {rid: d.to_record() for rid, d in sorted(self.data_table.items())},
            "resources": list(self.resource_digest_log),
            "flagged": sorted(self.flagged),
        })

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChainState):
            return NotImplemented
        return self.fingerprint() == other.fingerprint()


def _entry_record(e: ScheduleEntry) -> dict:
    return {"workflow_id": e.workflow_id, "source": e.source, "designated": e.designated,
            "snapshot": e.snapshot.digest(), "attempt": e.attempt, "excluded": list(e.excluded),
            "status": e.status.value, "final": e.final,
            "schedule": e.schedule.to_record() if e.schedule else None,
            "history": [[a, s.value] for a, s in e.history]}


def genesis_state(config: GenesisConfig) -> ChainState:
    return ChainState(config)


# -- transaction application ------------------------------------------------------

def _with_entry(state: ChainState, rid: RequestId, entry: ScheduleEntry) -> ChainState:
    table = dict(state.schedule_table)
    table[rid] = entry
    return replace(state, schedule_table=table)


def _require_entry(state: ChainState, txn: Transaction) -> ScheduleEntry:
    if txn.request_id is None:
        raise MalformedTransaction(f"{txn.kind.value} requires a request id")
    entry = state.schedule_table.get(txn.request_id)
    if entry is None:
        raise UnknownRequest(f"no schedule request {txn.request_id}")
    return entry


def apply_transaction(state: ChainState, txn: Transaction,
                      scheme: Optional[SignatureScheme] = DEFAULT_SIGNER) -> ChainState:
    """Apply one transaction or raise a :class:`LedgerError` subclass."""
    if not isinstance(txn.payload, _PAYLOAD_TYPES[txn.kind]):
        raise MalformedTransaction(f"{txn.kind.value} carries {type(txn.payload).__name__}")
    if scheme is not None and not scheme.verify(txn.signer, txn.digest.encode(), txn.signature):
        raise MalformedTransaction("bad signature")
    handler = _HANDLERS[txn.kind]
    return handler(state, txn)


def _apply_data(state: ChainState, txn: Transaction) -> ChainState:
    if txn.request_id is None:
        raise MalformedTransaction("Data requires a request id")
    if txn.request_id in state.data_table:
        raise IllegalTransition(f"data for {txn.request_id} already recorded")
    data = dict(state.data_table)
    data[txn.request_id] = txn.payload
    return replace(state, data_table=data)


def _apply_status(state: ChainState, txn: Transaction) -> ChainState:
    p: StatusPayload = txn.payload
    if p.status is ScheduleStatus.REQUESTED:
        # announces a first attempt; the ScheduleRequest that follows creates the entry
        if txn.request_id is None:
            raise MalformedTransaction("Status requires a request id")
        if txn.request_id in state.schedule_table or p.attempt != 1:
            raise IllegalTransition(f"{txn.request_id} is already requested")
        return state
    entry = _require_entry(state, txn)
    if p.attempt != entry.attempt:
        raise IllegalTransition(f"status for attempt {p.attempt}, current attempt is {entry.attempt}")
    if p.status is ScheduleStatus.ACTIVE:
        # acknowledgement of the confirmation applied just before it
        if txn.signer != entry.designated:
            raise UnauthorizedProposer(f"{txn.signer} is not the designated node {entry.designated}")
        if entry.status is not ScheduleStatus.ACTIVE:
            raise IllegalTransition(f"{entry.status.value} -> Active without a confirmation")
        return state
    if not is_legal_transition(entry.status, p.status):
        raise IllegalTransition(f"{entry.status.value} -> {p.status.value}")
    final = p.final if p.status is ScheduleStatus.FAILED else entry.final
    new = replace(entry, status=p.status, final=final, history=entry.history + ((entry.attempt, p.status),))
    return _with_entry(state, txn.request_id, new)


def _apply_schedule_request(state: ChainState, txn: Transaction) -> ChainState:
    p: ScheduleRequestPayload = txn.payload
    rid = txn.request_id
    if rid is None:
        raise MalformedTransaction("ScheduleRequest requires a request id")
    if p.workflow_id not in state.workflow_table:
        raise UnknownWorkflow(f"workflow {p.workflow_id} is not registered")
    members = state.genesis.members
    if set(p.snapshot.nodes()) != set(members):
        raise InvalidDesignation("resource snapshot does not cover exactly the cluster members")
    entry = state.schedule_table.get(rid)
    if entry is None:
        if p.attempt != 1 or p.excluded:
            raise IllegalTransition(f"first request for {rid} must be attempt 1 with no exclusions")
    else:
        if entry.status is not ScheduleStatus.FAILED or entry.final or p.attempt != entry.attempt + 1:
            raise IllegalTransition(f"{rid} cannot be re-requested as attempt {p.attempt}")
        if not (set(entry.excluded) | {entry.designated}) <= set(p.excluded):
            raise InvalidDesignation("reassignment must exclude previous designees")
    if p.attempt > len(members):
        raise IllegalTransition(f"attempt {p.attempt} exceeds cluster size")
    candidates = [m for m in members if m not in set(p.excluded)]
    if not candidates or p.designated != designate(candidates, p.snapshot, state.genesis.weights):
        raise InvalidDesignation(f"{p.designated} is not the designation for the recorded snapshot")
    history = entry.history if entry else ()
    new = ScheduleEntry(p.workflow_id, p.source, p.designated, p.snapshot, p.attempt, tuple(p.excluded),
                        ScheduleStatus.REQUESTED, None, False,
                        history + ((p.attempt, ScheduleStatus.REQUESTED),))
    return _with_entry(state, rid, new)


def _apply_confirmation(state: ChainState, txn: Transaction) -> ChainState:
    p: ScheduleConfirmationPayload = txn.payload
    entry = _require_entry(state, txn)
    if entry.schedule is not None:
        raise DuplicateConfirmation(f"{txn.request_id} already has a confirmed schedule")
    if p.attempt != entry.attempt or entry.status is not ScheduleStatus.REQUESTED:
        raise IllegalTransition(f"confirmation for attempt {p.attempt} while entry is "
                                f"{entry.status.value} at attempt {entry.attempt}")
    if p.proposer != entry.designated or txn.signer != p.proposer or p.schedule.proposer != p.proposer:
        raise UnauthorizedProposer(f"{txn.signer} is not the designated node {entry.designated}")
    if p.schedule.request_id != txn.request_id:
        raise MalformedTransaction("schedule request id mismatch")
    dag = state.workflow_table[entry.workflow_id]
    if not (check_completeness(p.schedule, dag, state.genesis.members)
            and check_level_preservation(p.schedule, dag)
            and check_feasibility(p.schedule, dag, entry.snapshot)):
        raise InvalidSchedule(f"schedule for {txn.request_id} violates protocol rules")
    new = replace(entry, status=ScheduleStatus.ACTIVE, schedule=p.schedule,
                  history=entry.history + ((entry.attempt, ScheduleStatus.ACTIVE),))
    return _with_entry(state, txn.request_id, new)


def _apply_resource_batch(state: ChainState, txn: Transaction) -> ChainState:
    return record_resource_batch(state, txn.payload.digests)


def _apply_workflow(state: ChainState, txn: Transaction) -> ChainState:
    dag: WorkflowDAG = txn.payload.dag
    if dag.workflow_id in state.workflow_table:
        raise IllegalTransition(f"workflow {dag.workflow_id} is immutable once stored")
    try:
        compute_levels(dag)
    except SchedulerError as exc:
        raise MalformedTransaction(str(exc)) from exc
    table = dict(state.workflow_table)
    table[dag.workflow_id] = dag
    return replace(state, workflow_table=table)


_HANDLERS = {
    TxnKind.DATA: _apply_data,
    TxnKind.STATUS: _apply_status,
    TxnKind.SCHEDULE_REQUEST: _apply_schedule_request,
    TxnKind.SCHEDULE_CONFIRMATION: _apply_confirmation,
    TxnKind.RESOURCE_BATCH: _apply_resource_batch,
    TxnKind.WORKFLOW_DEFINITION: _apply_workflow,
}


def record_resource_batch(state: ChainState, batch: Sequence[str]) -> ChainState:
    if len(batch) != state.genesis.batch_size:
        raise WrongBatchSize(f"batch of {len(batch)}, expected {state.genesis.batch_size}")
    return replace(state, resource_digest_log=state.resource_digest_log + tuple(batch))


def query_schedule(state: ChainState, rid: str):
    """``(status, designated, schedule or None)`` for ``rid``."""
    entry = state.schedule_table.get(rid)
    if entry is None:
        raise UnknownRequest(f"no schedule request {rid}")
    return entry.status, entry.designated, entry.schedule


# -- blocks --------------------------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    block_height: int
    txn_index: int
    kind: TxnKind
    request_id: Optional[str]
    signer: NodeId
    txn_digest: str
    error: Optional[str] = None

    @property
    def accepted(self) -> bool:
        return self.error is None

    def tsv(self) -> str:
        verdict = "accepted" if self.error is None else f"rejected:{self.error}"
        return "\t".join([str(self.block_height), str(self.txn_index), self.kind.value,
                          self.request_id or "-", self.signer, verdict])


def verify_certificate(state: ChainState, block: Block,
                       scheme: Optional[SignatureScheme] = DEFAULT_SIGNER) -> None:
    qc = block.consensus_proof
    if qc is None or qc.block_digest != block.digest or qc.sequence != block.height:
        raise InsufficientQuorum("missing or mismatched consensus proof")
    members = set(state.genesis.members)
    msg = commit_signing_bytes(qc.view, qc.sequence, qc.block_digest)
    valid = {s for s, sig in qc.votes
             if s in members and (scheme is None or scheme.verify(s, msg, sig))}
    if len(valid) < state.genesis.quorum:
        raise InsufficientQuorum(f"{len(valid)} valid votes, need {state.genesis.quorum}")


_FLAGGING = (UnauthorizedProposer, DuplicateConfirmation)


def append_block(state: ChainState, block: Block,
                 scheme: Optional[SignatureScheme] = DEFAULT_SIGNER) -> tuple[ChainState, list[Verdict]]:
    """Commit ``block``; rejected transactions are skipped, not fatal."""
    if block.parent_digest != state.head_digest or block.height != state.height + 1:
        raise BadParent(f"block {block.height} does not extend head {state.height}")
    verify_certificate(state, block, scheme)
    verdicts = []
    flagged = set(state.flagged)
    for i, txn in enumerate(block.transactions):
        try:
            state = apply_transaction(state, txn, scheme)
            error = None
        except LedgerError as exc:
            error = exc.code
            if txn.kind is TxnKind.SCHEDULE_CONFIRMATION and isinstance(exc, _FLAGGING):
                flagged.add(txn.signer)
        verdicts.append(Verdict(block.height, i, txn.kind, txn.request_id, txn.signer, txn.digest, error))
    state = replace(state, blocks=state.blocks + (block,), flagged=frozenset(flagged))
    return state, verdicts


def replay(genesis: GenesisConfig, blocks: Iterable[Block],
           scheme: Optional[SignatureScheme] = DEFAULT_SIGNER) -> ChainState:
    state = genesis_state(genesis)
    for b in blocks:
        state, _ = append_block(state, b, scheme)
    return state


def ledger_trace_lines(verdicts: Iterable[Verdict]) -> list[str]:
    """Tab-separated export: height, index, kind, request_id, signer, verdict."""
    return [v.tsv() for v in verdicts]
