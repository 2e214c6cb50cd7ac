"""Three-phase PBFT ordering with a simplified view change.

A :class:`Replica` is a transition system driven entirely by its caller:
every entry point takes the current simulated time and returns
``(outbox, committed)`` where ``outbox`` is a list of messages to broadcast
to all other members and ``committed`` lists blocks that became final, in
sequence order. The replica owns no threads or clocks; it only exposes the
deadline at which :meth:`Replica.on_timer` wants to be called.
"""
from __future__ import annotations

import enum
import functools
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .crypto import DEFAULT_SIGNER, SignatureScheme
from .ledger import Block, QuorumCertificate, Transaction

NodeId = str


class NotPrimary(Exception):
    pass


class Phase(str, enum.Enum):
    PRE_PREPARE = "PrePrepare"
    PREPARE = "Prepare"
    COMMIT = "Commit"
    VIEW_CHANGE = "ViewChange"
    NEW_VIEW = "NewView"


COUNTER_KEYS = {
    Phase.PRE_PREPARE: "preprepare",
    Phase.PREPARE: "prepare",
    Phase.COMMIT: "commit",
    Phase.VIEW_CHANGE: "viewchange",
    Phase.NEW_VIEW: "viewchange",
}


@dataclass(frozen=True)
class ClusterConfig:
    members: tuple[NodeId, ...]
    f: int
    view: int = 0

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if self.f < 0:
            raise ValueError("f must be non-negative")
        if len(self.members) < 3 * self.f + 1:
            raise ValueError(f"{len(self.members)} members cannot tolerate f={self.f} (need 3f+1)")
        if len(set(self.members)) != len(self.members):
            raise ValueError("duplicate member ids")

    @property
    def n(self) -> int:
        return len(self.members)

    def primary(self, view: Optional[int] = None) -> NodeId:
        v = self.view if view is None else view
        return self.members[v % len(self.members)]


def quorum_size(config: ClusterConfig) -> int:
    return 2 * config.f + 1


@dataclass(frozen=True, eq=False)
class ConsensusMessage:
    """One PBFT message.

    ``certs`` is phase-specific: a ViewChange carries its prepared slots as
    ``(sequence, view, block)``; a NewView carries the re-proposals as
    ``(sequence, block)`` and names its view-change quorum in
    ``vc_senders``. For ViewChange ``sequence`` is the sender's last
    committed sequence number.
    """

    phase: Phase
    view: int
    sequence: int
    block_digest: str
    sender: NodeId
    signature: bytes = b""
    block: Optional[Block] = None
    certs: tuple = ()
    vc_senders: tuple[NodeId, ...] = ()

    @functools.cached_property
    def _signing_bytes(self) -> bytes:
        base = f"{self.phase.value}|{self.view}|{self.sequence}|{self.block_digest}"
        if self.phase is Phase.VIEW_CHANGE:
            base += "|" + ",".join(f"{s}:{v}:{b.digest}" for s, v, b in self.certs)
        elif self.phase is Phase.NEW_VIEW:
            base += "|" + ",".join(f"{s}:{b.digest}" for s, b in self.certs) + "|" + ",".join(self.vc_senders)
        return base.encode()

    def signing_bytes(self) -> bytes:
        # every recipient of a broadcast verifies the same object, so the
        # encoding is computed once per message
        return self._signing_bytes


@dataclass
class Slot:
    view: int
    digest: Optional[str] = None
    block: Optional[Block] = None
    prepares: dict = field(default_factory=dict)  # sender -> digest, first vote wins
    commits: dict = field(default_factory=dict)   # sender -> (digest, signature)
    prepared: bool = False
    committed: bool = False
    applied: bool = False


class Replica:
    def __init__(self, node_id: NodeId, config: ClusterConfig,
                 scheme: SignatureScheme = DEFAULT_SIGNER,
                 view_timeout_ms: float = 2000.0, genesis_digest: str = ""):
        if node_id not in config.members:
            raise ValueError(f"{node_id} is not a member")
        self.node_id = node_id
        self.config = config
        self.scheme = scheme
        self.view_timeout_ms = view_timeout_ms
        self.members = config.members
        self.member_set = frozenset(config.members)
        self.f = config.f
        self.q = quorum_size(config)
        self.view = config.view
        self.slots: dict[int, Slot] = {}
        self.open_seqs: set[int] = set()
        self.last_committed = 0
        self.committed_blocks: dict[int, Block] = {}
        self.next_seq = 1
        self.head_digest = genesis_digest
        self.genesis_digest = genesis_digest
        self.mempool: dict[str, Transaction] = {}
        self.committed_txns: set[str] = set()
        self.in_flight: set[str] = set()
        self.timer_deadline: Optional[float] = None
        self.in_view_change = False
        self.vc_target: Optional[int] = None
        self.vc_msgs: dict[int, dict[NodeId, ConsensusMessage]] = {}
        self.new_view_sent: set[int] = set()
        self.future: list[ConsensusMessage] = []
        self.sent: Counter = Counter()
        self.bad_signatures = 0

    # -- helpers -----------------------------------------------------------

    def primary(self, view: Optional[int] = None) -> NodeId:
        v = self.view if view is None else view
        return self.members[v % len(self.members)]

    @property
    def is_primary(self) -> bool:
        return self.primary() == self.node_id

    @property
    def wants_proposal(self) -> bool:
        if not self.is_primary or self.in_view_change:
            return False
        return any(d not in self.in_flight for d in self.mempool)

    def _outstanding(self) -> bool:
        return bool(self.mempool) or bool(self.open_seqs)

    def _arm(self, now: float) -> None:
        if self.timer_deadline is None and self._outstanding():
            self.timer_deadline = now + self.view_timeout_ms

    def _rearm(self, now: float) -> None:
        self.timer_deadline = now + self.view_timeout_ms if self._outstanding() else None

    def _msg(self, phase: Phase, seq: int, digest: str, **kw) -> ConsensusMessage:
        view = kw.pop("view", self.view)
        unsigned = ConsensusMessage(phase, view, seq, digest, self.node_id, **kw)
        sig = self.scheme.sign(self.node_id, unsigned.signing_bytes())
        msg = ConsensusMessage(phase, view, seq, digest, self.node_id, sig, **kw)
        self.sent[COUNTER_KEYS[phase]] += len(self.members) - 1
        return msg

    def _slot(self, seq: int) -> Slot:
        slot = self.slots.get(seq)
        if slot is None or slot.view != self.view:
            slot = Slot(self.view)
            self.slots[seq] = slot
        return slot

    def message_counts(self) -> dict[str, int]:
        return {k: self.sent.get(k, 0) for k in ("preprepare", "prepare", "commit", "viewchange")}

    # -- client side -------------------------------------------------------

    def submit(self, txns: Sequence[Transaction], now: float) -> None:
        for t in txns:
            d = t.digest
            if d not in self.committed_txns and d not in self.mempool:
                self.mempool[d] = t
        self._arm(now)

    def propose(self, now: float):
        if not self.is_primary or self.in_view_change:
            raise NotPrimary(f"{self.node_id} is not primary of view {self.view}")
        txns = tuple(t for d, t in self.mempool.items() if d not in self.in_flight)
        if not txns:
            return [], []
        seq = self.next_seq
        block = Block(seq, self.head_digest, txns)
        self.next_seq += 1
        self.head_digest = block.digest
        self.slots[seq] = Slot(self.view, block.digest, block)
        self.open_seqs.add(seq)
        self.in_flight.update(t.digest for t in txns)
        out = [self._msg(Phase.PRE_PREPARE, seq, block.digest, block=block)]
        self._arm(now)
        more, committed = self._progress(seq, now)
        return out + more, committed

    # -- message handling --------------------------------------------------

    def handle_message(self, msg: ConsensusMessage, now: float):
        if msg.sender not in self.member_set:
            return [], []
        if not self.scheme.verify(msg.sender, msg.signing_bytes(), msg.signature):
            self.bad_signatures += 1
            return [], []
        return self._dispatch(msg, now)

    def _dispatch(self, msg: ConsensusMessage, now: float):
        phase = msg.phase
        if phase is Phase.VIEW_CHANGE:
            return self._on_view_change(msg, now), []
        if phase is Phase.NEW_VIEW:
            return self._on_new_view(msg, now)
        if msg.view < self.view:
            return [], []
        if msg.view > self.view:
            self.future.append(msg)
            return [], []
        if self.in_view_change:
            return [], []
        if phase is Phase.PRE_PREPARE:
            return self._on_preprepare(msg, now)
        if phase is Phase.PREPARE:
            return self._on_prepare(msg, now)
        return self._on_commit(msg, now)

    def _on_preprepare(self, msg: ConsensusMessage, now: float):
        block = msg.block
        if (msg.sender != self.primary() or block is None or block.digest != msg.block_digest
                or block.height != msg.sequence):
            return [], []
        seq = msg.sequence
        if seq <= self.last_committed and seq not in self.slots:
            return [], []
        slot = self._slot(seq)
        if slot.digest is not None:
            return [], []  # duplicate or equivocating pre-prepare
        slot.digest, slot.block = block.digest, block
        if not slot.applied:
            self.open_seqs.add(seq)
        out = []
        if not self.is_primary:
            slot.prepares[self.node_id] = block.digest
            out.append(self._msg(Phase.PREPARE, seq, block.digest))
        self._arm(now)
        more, committed = self._progress(seq, now)
        return out + more, committed

    def _on_prepare(self, msg: ConsensusMessage, now: float):
        if msg.sender == self.primary():
            return [], []
        seq = msg.sequence
        if seq <= self.last_committed and seq not in self.slots:
            return [], []
        slot = self._slot(seq)
        if msg.sender in slot.prepares:
            return [], []
        slot.prepares[msg.sender] = msg.block_digest
        return self._progress(seq, now)

    def _on_commit(self, msg: ConsensusMessage, now: float):
        seq = msg.sequence
        if seq <= self.last_committed and seq not in self.slots:
            return [], []
        slot = self._slot(seq)
        if msg.sender in slot.commits:
            return [], []
        slot.commits[msg.sender] = (msg.block_digest, msg.signature)
        return self._progress(seq, now)

    def _progress(self, seq: int, now: float):
        slot = self.slots[seq]
        out, committed = [], []
        digest = slot.digest
        if digest is None:
            return out, committed
        q = self.q
        if not slot.prepared and len(slot.prepares) + 1 >= q:
            primary = self.primary(slot.view)
            votes = 1 + sum(1 for s, d in slot.prepares.items() if d == digest and s != primary)
            if votes >= q:
                slot.prepared = True
                msg = self._msg(Phase.COMMIT, seq, digest)
                slot.commits[self.node_id] = (digest, msg.signature)
                out.append(msg)
        if slot.prepared and not slot.committed and len(slot.commits) >= q:
            votes = sum(1 for d, _ in slot.commits.values() if d == digest)
            if votes >= q:
                slot.committed = True
                committed = self._apply_ready(now)
        return out, committed

    def _apply_ready(self, now: float) -> list[Block]:
        blocks = []
        while True:
            seq = self.last_committed + 1
            slot = self.slots.get(seq)
            if slot is None or not slot.committed or slot.applied:
                break
            votes = tuple(sorted((s, sig) for s, (d, sig) in slot.commits.items() if d == slot.digest))
            qc = QuorumCertificate(slot.view, seq, slot.digest, votes)
            block = replace(slot.block, consensus_proof=qc)
            slot.applied = True
            self.open_seqs.discard(seq)
            self.last_committed = seq
            self.committed_blocks[seq] = slot.block
            for t in block.transactions:
                d = t.digest
                self.committed_txns.add(d)
                self.mempool.pop(d, None)
                self.in_flight.discard(d)
            blocks.append(block)
        if blocks:
            self._rearm(now)
        return blocks

    # -- view change -------------------------------------------------------

    def on_timer(self, now: float):
        if self.timer_deadline is None or now < self.timer_deadline:
            return [], []
        if not self._outstanding():
            self.timer_deadline = None
            return [], []
        target = (self.vc_target if self.in_view_change else self.view) + 1
        out = self._start_view_change(target, now)
        self.timer_deadline = now + self.view_timeout_ms
        return out, []

    def _start_view_change(self, target: int, now: float) -> list[ConsensusMessage]:
        self.in_view_change = True
        self.vc_target = target
        certs = tuple((s, slot.view, slot.block) for s, slot in sorted(self.slots.items())
                      if slot.block is not None and (slot.prepared or slot.applied))
        msg = self._msg(Phase.VIEW_CHANGE, self.last_committed, "", view=target, certs=certs)
        self.vc_msgs.setdefault(target, {})[self.node_id] = msg
        return [msg] + self._try_new_view(target, now)

    def _on_view_change(self, msg: ConsensusMessage, now: float) -> list[ConsensusMessage]:
        if msg.view <= self.view:
            return []
        self.vc_msgs.setdefault(msg.view, {}).setdefault(msg.sender, msg)
        out = []
        current = self.vc_target if self.in_view_change else self.view
        higher = {s for v, msgs in self.vc_msgs.items() if v > current for s in msgs}
        if len(higher) >= self.f + 1:
            target = min(v for v, msgs in self.vc_msgs.items() if v > current and msgs)
            out += self._start_view_change(target, now)
            self.timer_deadline = now + self.view_timeout_ms
        if self.primary(msg.view) == self.node_id:
            out += self._try_new_view(msg.view, now)
        return out

    def _try_new_view(self, v: int, now: float) -> list[ConsensusMessage]:
        msgs = self.vc_msgs.get(v, {})
        if (v in self.new_view_sent or len(msgs) < self.q or self.primary(v) != self.node_id
                or not (self.in_view_change and self.vc_target == v)):
            return []
        low = min(m.sequence for m in msgs.values())
        best: dict[int, tuple[int, Block]] = {}
        for m in msgs.values():
            for s, sview, block in m.certs:
                if s > low and (s not in best or sview > best[s][0]):
                    best[s] = (sview, block)
        repro = []
        s = low + 1
        while s in best:  # stop at the first gap: nothing past it can have committed
            repro.append((s, best[s][1]))
            s += 1
        self.new_view_sent.add(v)
        nv = self._msg(Phase.NEW_VIEW, low, "", view=v, certs=tuple(repro),
                       vc_senders=tuple(sorted(msgs)))
        self._enter_view(v, repro, now)
        end = low + len(repro)
        self.next_seq = max(end, self.last_committed) + 1
        last = self.next_seq - 1
        if last == 0:
            self.head_digest = self.genesis_digest
        elif repro and repro[-1][0] == last:
            self.head_digest = repro[-1][1].digest
        else:
            self.head_digest = self.committed_blocks[last].digest
        return [nv]

    def _enter_view(self, v: int, repro, now: float) -> None:
        self.view = v
        self.in_view_change = False
        self.vc_target = None
        repro_seqs = {s for s, _ in repro}
        for s in [s for s, slot in self.slots.items() if not slot.applied and s not in repro_seqs]:
            del self.slots[s]
        self.in_flight = set()
        self.open_seqs = set()
        for s, block in repro:
            applied = s <= self.last_committed
            if applied and self.committed_blocks[s].digest != block.digest:
                continue
            self.slots[s] = Slot(v, block.digest, block, committed=applied, applied=applied)
            if not applied:
                self.open_seqs.add(s)
                self.in_flight.update(t.digest for t in block.transactions)
        for old in [w for w in self.vc_msgs if w <= v]:
            del self.vc_msgs[old]
        self._rearm(now)

    def _on_new_view(self, msg: ConsensusMessage, now: float):
        v = msg.view
        if v <= self.view or (self.in_view_change and v < self.vc_target):
            return [], []
        if msg.sender != self.primary(v) or len(set(msg.vc_senders) & self.member_set) < self.q:
            return [], []
        for s, block in msg.certs:
            if block.height != s:
                return [], []
        self._enter_view(v, msg.certs, now)
        out, committed = [], []
        for s, block in msg.certs:
            slot = self.slots.get(s)
            if slot is None:
                continue
            slot.prepares[self.node_id] = block.digest
            out.append(self._msg(Phase.PREPARE, s, block.digest))
        for s, _ in msg.certs:
            if s in self.slots:
                o, c = self._progress(s, now)
                out += o
                committed += c
        buffered, self.future = self.future, []
        for m in buffered:
            if m.view == v:
                o, c = self._dispatch(m, now)
                out += o
                committed += c
            elif m.view > v:
                self.future.append(m)
        return out, committed
