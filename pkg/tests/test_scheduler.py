import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bftsched.ledger import ScheduleEntry
from bftsched.scheduler import (
    DEFAULT_RULES,
    CyclicGraph,
    DesignationWeights,
    EmptyCluster,
    Infeasible,
    InvalidWorkflow,
    ResourceMap,
    ResourceState,
    Schedule,
    TaskSpec,
    WorkflowDAG,
    check_feasibility,
    compute_levels,
    designate,
    eligible_nodes,
    generate_schedule,
    node_load,
    selection_distribution,
    selection_weight,
    validate_schedule,
)

from conftest import chain_dag, diamond_dag, uniform_resources
from oracles import brute_force_violations, oracle_levels, permutation_designee, random_dag_instance

W = DesignationWeights()


def avail_map(spec):
    """{node: (cpu_avail, mem_avail)} on 4000m / 8192Mi nodes."""
    return ResourceMap({n: ResourceState(4000, 4000 - c, 8192, 8192 - m) for n, (c, m) in spec.items()})


# -- designation ------------------------------------------------------------

def test_designate_dominating_node():
    res = avail_map({"A": (4000, 8192), "B": (2000, 4096)})
    assert designate(["A", "B"], res, W) == "A"
    assert designate(["B", "A"], res, W) == "A"


def test_designate_single_member():
    assert designate(["B"], avail_map({"B": (10, 10)}), W) == "B"


def test_designate_tie_goes_to_smallest_id_under_any_order():
    res = avail_map({"B": (1000, 1000), "A": (1000, 1000), "C": (10, 10)})
    assert permutation_designee(["A", "B", "C"], res, W) == {"A"}


def test_designate_empty_cluster():
    with pytest.raises(EmptyCluster):
        designate([], avail_map({"A": (1, 1)}), W)


def test_designation_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        DesignationWeights(0.7, 0.7)


def test_designation_normalises_units():
    # B has more raw megabytes free but a smaller fraction of its total
    res = ResourceMap({"A": ResourceState(1000, 0, 1000, 0), "B": ResourceState(8000, 4000, 64000, 32000)})
    assert designate(["A", "B"], res, W) == "A"


@st.composite
def resource_instances(draw):
    n = draw(st.integers(1, 6))
    members = [f"m{i}" for i in range(n)]
    grid = st.sampled_from([0.0, 1000.0, 2000.0, 3000.0])  # coarse grid forces ties
    entries = {m: ResourceState(4000, draw(grid), 8192, draw(grid)) for m in members}
    return members, ResourceMap(entries)


@settings(max_examples=200, deadline=None)
@given(resource_instances(), st.randoms(use_true_random=False))
def test_designation_permutation_invariant(instance, r):
    members, res = instance
    shuffled = members[:]
    r.shuffle(shuffled)
    assert designate(shuffled, res, W) == designate(members, res, W)


# -- levels -------------------------------------------------------------------

def test_levels_chain():
    assert compute_levels(chain_dag()) == {"a": 0, "b": 1, "c": 2}


def test_levels_diamond():
    assert compute_levels(diamond_dag()) == {"A": 0, "B": 1, "C": 1, "D": 2}


def test_levels_cycle():
    t = lambda i: TaskSpec(i, i, 1, 1)
    dag = WorkflowDAG("cyc", (t("x"), t("y"), t("z")), (("x", "y"), ("y", "z"), ("z", "x")))
    with pytest.raises(CyclicGraph):
        compute_levels(dag)
    with pytest.raises(CyclicGraph):
        WorkflowDAG.from_document(dag.to_document())


def test_dag_rejects_unknown_edge_endpoint():
    with pytest.raises(InvalidWorkflow):
        WorkflowDAG("w", (TaskSpec("x", "x", 1, 1),), (("x", "nope"),))


def test_dag_document_round_trip():
    dag = diamond_dag()
    assert WorkflowDAG.from_document(dag.to_document()) == dag


@settings(max_examples=150, deadline=None)
@given(st.randoms(use_true_random=False))
def test_levels_match_longest_path_oracle(r):
    dag, _, tasks, edges, _ = random_dag_instance(r)
    assert compute_levels(dag) == oracle_levels(tuple(tasks), tuple(edges))


# -- eligibility, load, weights -------------------------------------------------

def test_eligible_filters_on_cpu():
    res = avail_map({"A": (1000, 4096), "B": (100, 4096)})
    assert eligible_nodes(TaskSpec("t", "t", 500, 256), res) == {"A"}


def test_eligible_empty_when_task_too_large():
    res = avail_map({"A": (1000, 4096)})
    assert eligible_nodes(TaskSpec("t", "t", 5000, 256), res) == set()


def test_eligible_is_inclusive_at_the_boundary():
    res = avail_map({"A": (1000, 4096)})
    assert eligible_nodes(TaskSpec("t", "t", 1000, 4096), res) == {"A"}


@pytest.mark.parametrize("cpu_used,mem_used,expected", [(0, 0, 0.0), (4000, 8192, 1.0), (2000, 4096, 0.5)])
def test_node_load(cpu_used, mem_used, expected):
    assert node_load(ResourceState(4000, cpu_used, 8192, mem_used)) == pytest.approx(expected)


def test_selection_weight_values():
    assert selection_weight(0.0) == pytest.approx(10.0)
    # independent evaluation of 1 / (1 + 0.1)
    assert selection_weight(1.0) == pytest.approx(10.0 / 11.0)
    assert selection_weight(0.9) == pytest.approx(1.0)


def test_selection_distribution_singleton():
    res = avail_map({"A": (4000, 8192), "B": (10, 10)})
    dist = selection_distribution(TaskSpec("t", "t", 100, 100), res)
    assert dict(dist.probabilities) == {"A": 1.0}


def test_selection_distribution_symmetric():
    dist = selection_distribution(TaskSpec("t", "t", 1, 1), uniform_resources(["A", "B"], 1000, 1000))
    assert dist.probabilities["A"] == pytest.approx(0.5)
    assert dist.probabilities["B"] == pytest.approx(0.5)


def test_selection_distribution_loads_zero_and_point_nine():
    res = ResourceMap({"A": ResourceState(4000, 0, 8192, 0), "B": ResourceState(4000, 3600, 8192, 0.9 * 8192)})
    dist = selection_distribution(TaskSpec("t", "t", 1, 1), res)
    assert dist.weights["A"] == pytest.approx(10.0)
    assert dist.weights["B"] == pytest.approx(1.0)
    assert dist.probabilities["A"] == pytest.approx(10 / 11)
    assert dist.probabilities["B"] == pytest.approx(1 / 11)
    assert math.isclose(sum(dist.probabilities.values()), 1.0, abs_tol=1e-9)


# -- generation -----------------------------------------------------------------

def test_generate_chain_assigns_all_tasks():
    res = uniform_resources(["n00", "n01", "n02"])
    s = generate_schedule(chain_dag(), res, random.Random(3), "r1", "n00")
    assert set(s.assignments) == {"a", "b", "c"}
    assert dict(s.levels) == {"a": 0, "b": 1, "c": 2}


def test_generate_single_eligible_node():
    res = avail_map({"A": (4000, 8192), "B": (0, 0)})
    dag = WorkflowDAG("w", (TaskSpec("t", "t", 100, 100),))
    for seed in range(20):
        assert generate_schedule(dag, res, random.Random(seed), "r", "A").assignments["t"] == "A"


def test_generate_infeasible():
    dag = WorkflowDAG("w", (TaskSpec("t", "t", 99999, 1),))
    with pytest.raises(Infeasible):
        generate_schedule(dag, uniform_resources(["A", "B"]), random.Random(0), "r", "A")


def test_generate_debits_within_a_schedule():
    # each node can host exactly one of the two tasks
    res = avail_map({"A": (600, 8192), "B": (600, 8192)})
    dag = WorkflowDAG("w", (TaskSpec("x", "x", 500, 10), TaskSpec("y", "y", 500, 10)))
    for seed in range(30):
        s = generate_schedule(dag, res, random.Random(seed), "r", "A")
        assert s.assignments["x"] != s.assignments["y"]


def test_generate_is_seed_deterministic():
    res = uniform_resources([f"n{i:02d}" for i in range(8)])
    a = generate_schedule(diamond_dag(), res, random.Random(99), "r", "n00")
    b = generate_schedule(diamond_dag(), res, random.Random(99), "r", "n00")
    assert a == b and a.to_record() == b.to_record()


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(0, 2**32 - 1))
def test_generated_schedules_pass_brute_force_validator(r, seed):
    dag, res, tasks, edges, avail = random_dag_instance(r)
    try:
        s = generate_schedule(dag, res, random.Random(seed), "r", "n00")
    except Infeasible:
        return
    assert brute_force_violations(s, tasks, edges, avail, set(res.nodes())) == []


def test_empirical_frequencies_follow_weights():
    res = ResourceMap({"A": ResourceState(4000, 0, 8192, 0), "B": ResourceState(4000, 3600, 8192, 0.9 * 8192)})
    dag = WorkflowDAG("w", (TaskSpec("t", "t", 1, 1),))
    rng = random.Random(5)
    counts = Counter(generate_schedule(dag, res, rng, "r", "A").assignments["t"] for _ in range(20_000))
    assert counts["A"] / 20_000 == pytest.approx(10 / 11, abs=0.01)


# -- validation -----------------------------------------------------------------

class _Chain:
    """Just enough ledger state for the validation rules."""

    def __init__(self, dag, designated, snapshot):
        self.workflow_table = {dag.workflow_id: dag}
        self.schedule_table = {"r": ScheduleEntry(dag.workflow_id, "iot00", designated, snapshot)}


def _valid_setup():
    res = uniform_resources(["n00", "n01", "n02", "n03"])
    dag = chain_dag()
    chain = _Chain(dag, "n01", res)
    sched = generate_schedule(dag, res, random.Random(0), "r", "n01")
    return res, dag, chain, sched


def test_generated_schedule_validates():
    res, _, chain, sched = _valid_setup()
    assert validate_schedule(sched, DEFAULT_RULES, chain, res) == []


def test_level_inversion_fails_level_rule():
    res, _, chain, sched = _valid_setup()
    bad = Schedule("r", "n01", dict(sched.assignments), {"a": 2, "b": 1, "c": 0})
    assert validate_schedule(bad, DEFAULT_RULES, chain, res) == ["level-preservation"]


def test_non_designated_proposer_fails():
    res, _, chain, sched = _valid_setup()
    bad = Schedule("r", "n02", dict(sched.assignments), dict(sched.levels))
    assert validate_schedule(bad, DEFAULT_RULES, chain, res) == ["proposer-is-designated"]


def test_oversubscription_fails_feasibility():
    res = avail_map({"n00": (600, 8192), "n01": (600, 8192)})
    dag = WorkflowDAG("w", (TaskSpec("x", "x", 500, 10), TaskSpec("y", "y", 500, 10)))
    s = Schedule("r", "n00", {"x": "n00", "y": "n00"}, {"x": 0, "y": 0})
    assert not check_feasibility(s, dag, res)
    chain = _Chain(dag, "n00", res)
    assert validate_schedule(s, DEFAULT_RULES, chain, res) == ["resource-feasibility"]


def test_unknown_node_fails_completeness():
    res, _, chain, sched = _valid_setup()
    bad = Schedule("r", "n01", {**sched.assignments, "a": "ghost"}, dict(sched.levels))
    failed = validate_schedule(bad, DEFAULT_RULES, chain, res)
    assert "schedule-completeness" in failed


def test_rule_set_is_extensible():
    res, _, chain, sched = _valid_setup()
    rules = DEFAULT_RULES.extended("never", lambda p, c, r: False)
    assert rules.names()[-1] == "never"
    assert validate_schedule(sched, rules, chain, res) == ["never"]
