import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bftsched.executor import (
    CompletionNotice,
    Executor,
    RunState,
    UnknownTask,
    complete_task,
    finalize_workflow,
    on_completion_notice,
    on_schedule_published,
    start_run,
)
from bftsched.ledger import ScheduleStatus
from bftsched.scheduler import Schedule, TaskSpec, WorkflowDAG, compute_levels

from conftest import chain_dag, diamond_dag


def sched_for(dag, assignments, rid="r1"):
    return Schedule(rid, "n00", assignments, compute_levels(dag))


def publish(node, dag, assignments, now=0.0):
    ex = Executor(node)
    started = on_schedule_published(ex, sched_for(dag, assignments), dag, "iot00", "key", 1, now)
    return ex, started


def notice(rid, task, node, t):
    return CompletionNotice(rid, task, node, f"output/{rid}/{task}", t)


def test_level_zero_task_starts_at_publication():
    ex, started = publish("n00", chain_dag(), {"a": "n00", "b": "n01", "c": "n02"}, now=7.0)
    assert [(r.task_id, r.started_at, r.state) for r in started] == [("a", 7.0, RunState.RUNNING)]


def test_node_without_level_zero_task_waits():
    ex, started = publish("n01", chain_dag(), {"a": "n00", "b": "n01", "c": "n01"})
    assert started == []
    assert all(r.state is RunState.WAITING for r in ex.views["r1"].runs.values())


def test_dependency_satisfied_by_notice():
    ex, _ = publish("n01", chain_dag(), {"a": "n00", "b": "n01", "c": "n02"})
    ready = on_completion_notice(ex, notice("r1", "a", "n00", 100.0), 105.0)
    assert [(r.task_id, r.ready_at) for r in ready] == [("b", 105.0)]


def test_partial_fan_in_keeps_waiting():
    dag = diamond_dag()
    ex, _ = publish("n03", dag, {"A": "n00", "B": "n01", "C": "n02", "D": "n03"})
    on_completion_notice(ex, notice("r1", "A", "n00", 1.0), 1.0)
    assert on_completion_notice(ex, notice("r1", "B", "n01", 2.0), 2.0) == []
    assert ex.views["r1"].runs["D"].state is RunState.WAITING
    assert [r.task_id for r in on_completion_notice(ex, notice("r1", "C", "n02", 3.0), 3.0)] == ["D"]


def test_duplicate_notice_is_idempotent():
    ex, _ = publish("n01", chain_dag(), {"a": "n00", "b": "n01", "c": "n02"})
    assert len(on_completion_notice(ex, notice("r1", "a", "n00", 1.0), 1.0)) == 1
    assert on_completion_notice(ex, notice("r1", "a", "n00", 1.0), 2.0) == []


def test_notice_for_unknown_request():
    ex = Executor("n00")
    with pytest.raises(UnknownTask):
        on_completion_notice(ex, notice("zz", "a", "n01", 0.0), 0.0)


def test_diamond_siblings_start_together():
    dag = diamond_dag()
    assign = {"A": "n00", "B": "n01", "C": "n02", "D": "n03"}
    exes = {n: publish(n, dag, assign)[0] for n in ("n01", "n02")}
    starts = {}
    for n, ex in exes.items():
        for run in on_completion_notice(ex, notice("r1", "A", "n00", 10.0), 10.0):
            starts[run.task_id] = start_run(run, 10.0).started_at
    assert starts == {"B": 10.0, "C": 10.0}


def test_last_chain_task_finalizes():
    dag = chain_dag()
    ex, _ = publish("n00", dag, {"a": "n00", "b": "n00", "c": "n00"})
    complete_task(ex, "r1", "a", 1.0)
    start_run(ex.views["r1"].runs["b"], 1.0)
    assert finalize_workflow(ex, "r1", 1.0) is None  # mid-level completion
    complete_task(ex, "r1", "b", 2.0)
    start_run(ex.views["r1"].runs["c"], 2.0)
    complete_task(ex, "r1", "c", 3.0)
    txn, result = finalize_workflow(ex, "r1", 3.0)
    assert txn.payload.status is ScheduleStatus.FINALIZED
    assert result.delivered_to == "iot00" and result.encrypted_with == "key"
    assert result.final_output_key == "output/r1/c"
    assert finalize_workflow(ex, "r1", 4.0) is None


def _two_sinks():
    t = lambda i: TaskSpec(i, i, 1, 1, 1.0)
    return WorkflowDAG("w", (t("s"), t("x"), t("y")), (("s", "x"), ("s", "y")))


@pytest.mark.parametrize("tx,ty,finalizer", [(5.0, 9.0, "n02"), (9.0, 5.0, "n01"), (5.0, 5.0, "n01")])
def test_single_finalizer_is_last_completer(tx, ty, finalizer):
    dag = _two_sinks()
    assign = {"s": "n00", "x": "n01", "y": "n02"}
    winners = []
    for node in ("n00", "n01", "n02"):
        ex, _ = publish(node, dag, assign)
        for task, who, t in (("s", "n00", 1.0), ("x", "n01", tx), ("y", "n02", ty)):
            if assign[task] == node:
                run = ex.views["r1"].runs[task]
                if run.state is RunState.WAITING:
                    on_completion_notice(ex, notice("r1", "s", "n00", 1.0), 1.0)
                if run.state is RunState.READY:
                    start_run(run, 1.0)
                complete_task(ex, "r1", task, t)
            else:
                on_completion_notice(ex, notice("r1", task, who, t), t)
        if finalize_workflow(ex, "r1", 10.0) is not None:
            winners.append(node)
    assert winners == [finalizer]


@settings(max_examples=80, deadline=None)
@given(st.randoms(use_true_random=False))
def test_randomised_delivery_single_finalizer_and_ordering(r):
    """Drive a random DAG across nodes with shuffled notice delivery."""
    n_tasks = r.randint(1, 7)
    ids = [f"t{i}" for i in range(n_tasks)]
    edges = [(ids[i], ids[j]) for i in range(n_tasks) for j in range(i + 1, n_tasks) if r.random() < 0.35]
    dag = WorkflowDAG("w", tuple(TaskSpec(t, t, 1, 1, float(r.randint(1, 5))) for t in ids), tuple(edges))
    nodes = ["n00", "n01", "n02"]
    assign = {t: r.choice(nodes) for t in ids}
    exes = {n: Executor(n) for n in nodes}
    queue = []  # (time, kind, node, payload)
    starts, finishes = {}, {}
    for n, ex in exes.items():
        for run in on_schedule_published(ex, sched_for(dag, assign), dag, "iot00", "k", 1, 0.0):
            queue.append((run.exec_duration, "done", n, run.task_id))
            starts[run.task_id] = 0.0
    finalizers = []
    while queue:
        queue.sort(key=lambda e: (e[0], r.random()))
        now, kind, node, payload = queue.pop(0)
        ex = exes[node]
        if kind == "done":
            note, ready = complete_task(ex, "r1", payload, now)
            finishes[payload] = now
            for other in nodes:
                if other != node:
                    queue.append((now + r.choice((0.0, 0.5, 1.0)), "notice", other, note))
        else:
            ready = on_completion_notice(ex, payload, now)
        for run in ready:
            start_run(run, now)
            starts[run.task_id] = now
            queue.append((now + run.exec_duration, "done", node, run.task_id))
        if finalize_workflow(ex, "r1", now) is not None:
            finalizers.append(node)
    assert len(finalizers) == 1
    assert set(finishes) == set(ids)
    for a, b in edges:
        assert finishes[a] <= starts[b]
