import random

import pytest

from bftsched.crypto import DEFAULT_SIGNER
from bftsched.ledger import (
    Block,
    GenesisConfig,
    QuorumCertificate,
    TxnKind,
    WorkflowDefinitionPayload,
    append_block,
    commit_signing_bytes,
    genesis_state,
    make_transaction,
)
from bftsched.scheduler import ResourceMap, ResourceState, TaskSpec, WorkflowDAG

MEMBERS4 = ("n00", "n01", "n02", "n03")


def chain_dag(workflow_id="wf"):
    return WorkflowDAG(workflow_id, (
        TaskSpec("a", "a", 500, 512, 100.0),
        TaskSpec("b", "b", 1000, 1024, 200.0),
        TaskSpec("c", "c", 250, 256, 50.0),
    ), (("a", "b"), ("b", "c")))


def diamond_dag(workflow_id="diamond"):
    return WorkflowDAG(workflow_id, (
        TaskSpec("A", "A", 100, 100, 10.0),
        TaskSpec("B", "B", 100, 100, 20.0),
        TaskSpec("C", "C", 100, 100, 30.0),
        TaskSpec("D", "D", 100, 100, 10.0),
    ), (("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")))


def uniform_resources(members, cpu_used=0.0, mem_used=0.0, t=0.0):
    return ResourceMap({m: ResourceState(4000, cpu_used, 8192, mem_used) for m in members}, t)


def make_block(state, txns, voters=None, view=0, scheme=DEFAULT_SIGNER):
    """A block extending ``state`` with a commit certificate from ``voters``."""
    block = Block(state.height + 1, state.head_digest, tuple(txns))
    voters = state.genesis.members[: state.genesis.quorum] if voters is None else voters
    msg = commit_signing_bytes(view, block.height, block.digest)
    votes = tuple(sorted((v, scheme.sign(v, msg)) for v in voters))
    qc = QuorumCertificate(view, block.height, block.digest, votes)
    return Block(block.height, block.parent_digest, block.transactions, qc)


def commit(state, txns, **kw):
    return append_block(state, make_block(state, txns, **kw))


@pytest.fixture
def genesis4():
    return GenesisConfig(MEMBERS4, 1, batch_size=10)


def build_chain4():
    """A 4-member chain with the 3-task chain workflow registered."""
    state = genesis_state(GenesisConfig(MEMBERS4, 1, batch_size=10))
    wf = make_transaction(TxnKind.WORKFLOW_DEFINITION, WorkflowDefinitionPayload(chain_dag()), "admin")
    state, verdicts = commit(state, [wf])
    assert verdicts[0].accepted
    return state


@pytest.fixture
def chain4():
    return build_chain4()


@pytest.fixture
def rng():
    return random.Random(1234)


# -- acceptance summary -----------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.failed:
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("measured", "")
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        status, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{status} {name} {detail}".rstrip())
