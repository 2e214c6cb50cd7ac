"""In-process data sub-layer: latest-state cache with pub/sub, append-only
persistent store, and the resource registrar that batches digests for the
ledger.

Key conventions: ``output/<request_id>/<task_id>``, ``input/<request_id>``,
``resource/<node_id>``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .crypto import canonical_json, digest_bytes
from .scheduler import ResourceMap, ResourceState

SCHEDULE_CHANNEL = "schedules"
COMPLETION_CHANNEL = "completions"


def output_key(request_id: str, task_id: str) -> str:
    return f"output/{request_id}/{task_id}"


def input_key(request_id: str) -> str:
    return f"input/{request_id}"


def resource_key(node: str) -> str:
    return f"resource/{node}"


class Missing(KeyError):
    pass


class CacheCluster:
    """Single logical cache: last-writer-wins keys and named channels."""

    def __init__(self):
        self.kv: dict[str, Any] = {}
        self.channels: dict[str, set[str]] = {}

    def put(self, key: str, value: Any) -> None:
        self.kv[key] = value

    def get(self, key: str) -> Any:
        try:
            return self.kv[key]
        except KeyError:
            raise Missing(key) from None

    def subscribe(self, channel: str, node: str) -> None:
        self.channels.setdefault(channel, set()).add(node)

    def unsubscribe(self, channel: str, node: str) -> None:
        self.channels.get(channel, set()).discard(node)

    def publish(self, channel: str, message: Any, deliver: Callable[[str, Any], None]) -> int:
        """Hand ``message`` to every current subscriber once; returns the count."""
        subscribers = sorted(self.channels.get(channel, ()))
        for node in subscribers:
            deliver(node, message)
        return len(subscribers)

    def resource_view(self, members: Iterable[str], now: float) -> ResourceMap:
        entries = {}
        for m in members:
            rec = self.kv.get(resource_key(m))
            if rec is None:
                raise Missing(resource_key(m))
            entries[m] = rec
        return ResourceMap(entries, now)


@dataclass(frozen=True)
class StoredRecord:
    timestamp: float
    node: str
    record: bytes

    @property
    def digest(self) -> str:
        return digest_bytes(self.record)


class PersistentStore:
    def __init__(self):
        self.records: list[StoredRecord] = []

    def append(self, timestamp: float, node: str, record: bytes) -> StoredRecord:
        rec = StoredRecord(timestamp, node, record)
        self.records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def resource_record_bytes(node: str, r: ResourceState, now: float) -> bytes:
    return canonical_json({"node": node, "time": now, "resources": r.to_record()}).encode()


@dataclass
class ResourceRegistrar:
    interval: float = 10_000.0
    batch_size: int = 10
    pending_digests: list[str] = field(default_factory=list)

    def tick(self, node: str, r: ResourceState, now: float, cache: Optional[CacheCluster],
             store: Optional[PersistentStore]) -> Optional[tuple[str, ...]]:
        """Record one sample at all three levels.

        Returns the digest batch to commit once ``batch_size`` samples have
        accumulated, else ``None``. ``cache`` and ``store`` may be ``None``
        when the caller ships the record to a remote data service itself.
        """
        record = resource_record_bytes(node, r, now)
        if cache is not None:
            cache.put(resource_key(node), r)
        if store is not None:
            store.append(now, node, record)
        self.pending_digests.append(digest_bytes(record))
        if len(self.pending_digests) >= self.batch_size:
            batch = tuple(self.pending_digests[: self.batch_size])
            del self.pending_digests[: self.batch_size]
            return batch
        return None


def verify_batches(digest_log: Iterable[str], store: PersistentStore) -> bool:
    """Every committed digest must match a distinct stored record."""
    counts: dict[str, int] = {}
    for rec in store:
        counts[rec.digest] = counts.get(rec.digest, 0) + 1
    for d in digest_log:
        if counts.get(d, 0) == 0:
            return False
        counts[d] -= 1
    return True
