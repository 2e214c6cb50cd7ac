"""Level-ordered task execution on one compute node.

The executor tracks, per request, the node's own :class:`TaskRun` objects
and every task it knows to be done (its own and those announced by
completion notices). Input fetching is left to the caller: a run moves to
Ready when its predecessors are done, and to Running when the caller has
its inputs and calls :func:`start_run`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from .crypto import DEFAULT_SIGNER, SignatureScheme, digest_record
from .datastores import output_key
from .ledger import ScheduleStatus, StatusPayload, Transaction, TxnKind, make_transaction
from .scheduler import Schedule, WorkflowDAG

NodeId = str


class UnknownTask(KeyError):
    pass


class RunState(str, enum.Enum):
    WAITING = "Waiting"
    READY = "Ready"
    RUNNING = "Running"
    DONE = "Done"


@dataclass
class TaskRun:
    request_id: str
    task_id: str
    assigned_node: NodeId
    level: int
    exec_duration: float
    state: RunState = RunState.WAITING
    ready_at: Optional[float] = None
    started_at: Optional[float] = None
    finished_at: Optional[float] = None

    @property
    def output_key(self) -> str:
        return output_key(self.request_id, self.task_id)


@dataclass(frozen=True)
class CompletionNotice:
    request_id: str
    task_id: str
    node: NodeId
    output_key: str
    finished_at: float


@dataclass(frozen=True)
class WorkflowResult:
    request_id: str
    final_output_key: str
    delivered_to: NodeId
    encrypted_with: str
    payload_digest: str


@dataclass
class WorkflowView:
    schedule: Schedule
    dag: WorkflowDAG
    source: NodeId
    response_key: str
    attempt: int
    runs: dict[str, TaskRun] = field(default_factory=dict)
    done: dict[str, tuple[NodeId, float]] = field(default_factory=dict)
    finalized: bool = False

    def all_done(self) -> bool:
        return len(self.done) == len(self.schedule.assignments)


class Executor:
    def __init__(self, node_id: NodeId):
        self.node_id = node_id
        self.views: dict[str, WorkflowView] = {}

    def running(self) -> list[TaskRun]:
        return [r for v in self.views.values() for r in v.runs.values() if r.state is RunState.RUNNING]


def synthetic_output(request_id: str, task_id: str) -> str:
    return digest_record({"request_id": request_id, "task_id": task_id})


def start_run(run: TaskRun, now: float) -> TaskRun:
    if run.state is not RunState.READY:
        raise ValueError(f"task {run.task_id} is {run.state.value}, not Ready")
    run.state = RunState.RUNNING
    run.started_at = now
    return run


def on_schedule_published(ex: Executor, schedule: Schedule, dag: WorkflowDAG, source: NodeId,
                          response_key: str, attempt: int, now: float) -> list[TaskRun]:
    """Track the schedule and start this node's level-0 tasks immediately."""
    if schedule.request_id in ex.views:
        return []
    view = WorkflowView(schedule, dag, source, response_key, attempt)
    ex.views[schedule.request_id] = view
    started = []
    for task_id in schedule.tasks_for(ex.node_id):
        task = dag.task(task_id)
        run = TaskRun(schedule.request_id, task_id, ex.node_id, schedule.levels[task_id], task.exec_duration)
        view.runs[task_id] = run
        if not dag.predecessors(task_id):
            run.state = RunState.READY
            run.ready_at = now
            started.append(start_run(run, now))
    return started


def _newly_ready(view: WorkflowView, now: float) -> list[TaskRun]:
    ready = []
    for task_id, run in sorted(view.runs.items()):
        if run.state is RunState.WAITING and all(p in view.done for p in view.dag.predecessors(task_id)):
            run.state = RunState.READY
            run.ready_at = now
            ready.append(run)
    return ready


def on_completion_notice(ex: Executor, notice: CompletionNotice, now: float) -> list[TaskRun]:
    """Record a finished task; returns this node's runs that just became Ready.

    Duplicate notices are idempotent. Raises :class:`UnknownTask` for a
    request this node is not tracking.
    """
    view = ex.views.get(notice.request_id)
    if view is None or notice.task_id not in view.schedule.assignments:
        raise UnknownTask(f"{notice.request_id}/{notice.task_id}")
    if notice.task_id in view.done:
        return []
    view.done[notice.task_id] = (notice.node, notice.finished_at)
    return _newly_ready(view, now)


def complete_task(ex: Executor, request_id: str, task_id: str,
                  now: float) -> tuple[CompletionNotice, list[TaskRun]]:
    """Mark an own task Done; returns its notice and own runs that became Ready."""
    view = ex.views[request_id]
    run = view.runs[task_id]
    if run.state is not RunState.RUNNING:
        raise ValueError(f"task {task_id} is {run.state.value}, not Running")
    run.state = RunState.DONE
    run.finished_at = now
    view.done[task_id] = (ex.node_id, now)
    notice = CompletionNotice(request_id, task_id, ex.node_id, run.output_key, now)
    return notice, _newly_ready(view, now)


def finalizing_task(view: WorkflowView) -> Optional[tuple[str, NodeId]]:
    """The max-level task that finished last (ties: smallest node id), once all are done."""
    if not view.all_done():
        return None
    top = max(view.schedule.levels.values())
    best = None
    for task_id, lvl in view.schedule.levels.items():
        if lvl != top:
            continue
        node, finished = view.done[task_id]
        key = (-finished, node, task_id)
        if best is None or key < best[0]:
            best = (key, task_id, node)
    return best[1], best[2]


def finalize_workflow(ex: Executor, request_id: str, now: float,
                      scheme: SignatureScheme = DEFAULT_SIGNER
                      ) -> Optional[tuple[Transaction, WorkflowResult]]:
    """Emit Status(Finalized) and the pending result if this node is the finalizer."""
    view = ex.views.get(request_id)
    if view is None or view.finalized:
        return None
    pick = finalizing_task(view)
    if pick is None or pick[1] != ex.node_id:
        return None
    task_id, _ = pick
    view.finalized = True
    txn = make_transaction(TxnKind.STATUS, StatusPayload(ScheduleStatus.FINALIZED, view.attempt),
                           ex.node_id, request_id, scheme)
    result = WorkflowResult(request_id, output_key(request_id, task_id), view.source, view.response_key,
                            synthetic_output(request_id, task_id))
    return txn, result
