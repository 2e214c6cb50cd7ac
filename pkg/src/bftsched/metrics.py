"""Metrics derived purely from a trace, and report emission.

Everything here reads :class:`~bftsched.simnet.Trace` records; nothing
looks at live node objects, so a trace file on disk yields the same report
as the run that produced it.
"""
from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from typing import Optional

from .crypto import digest_record

CSV_COLUMNS = ["request_id", "source", "sent_ms", "active_ms", "finalized_ms", "delivered_ms", "rrt_ms",
               "exec_total_ms", "fo_ms", "attempts", "status"]

COMPLETE = "complete"
FAILED = "failed"
INCOMPLETE = "IncompleteTrace"



def latency_note(latency: dict) -> str:
    """Report header line describing the latency model a run used."""
    dist = latency.get("distribution", "lognormal")
    if dist == "fixed":
        model = "fixed link latencies, no jitter"
    else:
        model = f"{dist} jitter, jitter_fraction={latency.get('jitter_fraction', 0.2)}"
    return (f"Latency model is a modelling choice ({model}); "
            "absolute times exclude any real ledger platform overhead.")


class IoFailure(OSError):
    pass


@dataclass
class RequestRow:
    request_id: str
    source: str
    sent_ms: float
    active_ms: Optional[float] = None
    finalized_ms: Optional[float] = None
    delivered_ms: Optional[float] = None
    rrt_ms: Optional[float] = None
    exec_total_ms: Optional[float] = None
    fo_ms: Optional[float] = None
    attempts: int = 0
    status: str = INCOMPLETE

    def csv_values(self) -> list[str]:
        return [self.request_id, self.source] + [_fmt(getattr(self, c)) for c in CSV_COLUMNS[2:-2]] + \
            [str(self.attempts), self.status]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _stats(xs: list[float]) -> dict:
    if not xs:
        return {"n": 0, "mean": None, "std": None, "min": None, "max": None}
    return {"n": len(xs), "mean": statistics.fmean(xs), "std": statistics.pstdev(xs) if len(xs) > 1 else 0.0,
            "min": min(xs), "max": max(xs)}


@dataclass
class MetricsReport:
    seed: int
    config_digest: str
    rows: list[RequestRow]
    detection_latencies_ms: list[float] = field(default_factory=list)
    recovery_times_ms: list[float] = field(default_factory=list)
    message_counts: dict = field(default_factory=dict)
    rejected_txns: int = 0
    false_positives: int = 0
    malicious_proposals: int = 0
    undetected_malicious: int = 0
    accepted_malicious: int = 0
    bad_signatures: int = 0
    exploratory: bool = False
    latency_note: str = ""

    @property
    def aggregates(self) -> dict:
        done = [r for r in self.rows if r.status == COMPLETE]
        total_msgs = sum(self.message_counts.values())
        return {
            "requests": len(self.rows),
            "complete": len(done),
            "failed": sum(r.status == FAILED for r in self.rows),
            "incomplete": sum(r.status == INCOMPLETE for r in self.rows),
            "rrt_ms": _stats([r.rrt_ms for r in done]),
            "fo_ms": _stats([r.fo_ms for r in done]),
            "detection_latency_ms": _stats(self.detection_latencies_ms),
            "recovery_time_ms": _stats(self.recovery_times_ms),
            "consensus_messages": dict(self.message_counts),
            "consensus_messages_per_request": total_msgs / len(self.rows) if self.rows else None,
            "rejected_txns": self.rejected_txns,
            "false_positives": self.false_positives,
            "malicious_proposals": self.malicious_proposals,
            "undetected_malicious": self.undetected_malicious,
            "accepted_malicious": self.accepted_malicious,
            "bad_signatures": self.bad_signatures,
        }


def compute_metrics(trace) -> MetricsReport:
    config = trace.config or {}
    byzantine: set[str] = set()
    exploratory = False
    sent: dict[str, tuple[float, str, str]] = {}
    delivered: dict[str, float] = {}
    active: dict[str, float] = {}
    finalized: dict[str, float] = {}
    failed_final: set[str] = set()
    attempts: dict[str, int] = {}
    first_rejection: dict[str, float] = {}
    rejected_conf_signers: dict[str, str] = {}
    accepted_txns: set[str] = set()
    rejected: set[str] = set()
    proposals = []
    ready_at: dict[tuple[str, str], float] = {}
    done_at: dict[tuple[str, str], float] = {}
    final_task: dict[str, str] = {}
    counts: dict[str, int] = {}
    bad_sigs = 0

    records = list(trace)
    for r in records:
        if r.kind == "fault" and "byzantine" in r.detail:
            byzantine.add(r.node)
    for r in records:
        kind, d = r.kind, r.detail
        if kind == "verdict":
            honest = r.node not in byzantine
            txn = d["txn"]
            if d["error"] is None:
                accepted_txns.add(txn)
                if not honest:
                    continue
                rid = d["rid"]
                k = d["kind"]
                if k == "ScheduleConfirmation":
                    if rid not in active or r.t < active[rid]:
                        active[rid] = r.t
                elif k == "ScheduleRequest":
                    attempts[rid] = max(attempts.get(rid, 0), d["attempt"])
                elif k == "Status":
                    if d["status"] == "Finalized" and (rid not in finalized or r.t < finalized[rid]):
                        finalized[rid] = r.t
                    elif d["status"] == "Failed" and d.get("final"):
                        failed_final.add(rid)
            else:
                rejected.add(txn)
                if honest and (txn not in first_rejection or r.t < first_rejection[txn]):
                    first_rejection[txn] = r.t
                if d["kind"] == "ScheduleConfirmation":
                    rejected_conf_signers[txn] = d["signer"]
        elif kind == "request_sent":
            sent[d["rid"]] = (r.t, r.node, d["workflow_id"])
        elif kind == "result_delivered":
            if d["rid"] not in delivered:
                delivered[d["rid"]] = r.t
        elif kind == "proposal":
            proposals.append((r.t, r.node, d))
        elif kind == "task_start":
            ready_at[(d["rid"], d["task"])] = d["ready"]
        elif kind == "task_done":
            done_at[(d["rid"], d["task"])] = r.t
        elif kind == "finalize":
            final_task[d["rid"]] = d["output_key"].rsplit("/", 1)[-1]
        elif kind == "counters":
            for key in ("preprepare", "prepare", "commit", "viewchange"):
                counts[key] = counts.get(key, 0) + d[key]
            bad_sigs += d.get("bad_signatures", 0)
        elif kind == "exploratory":
            exploratory = True

    dags = {doc["workflow_id"]: doc for doc in config.get("workflows", [])}
    rows = []
    for rid, (t_sent, source, wid) in sorted(sent.items(), key=lambda kv: (kv[1][0], kv[0])):
        row = RequestRow(rid, source, t_sent, active.get(rid), finalized.get(rid), delivered.get(rid),
                         attempts=attempts.get(rid, 0))
        if rid in delivered:
            row.rrt_ms = delivered[rid] - t_sent
            row.exec_total_ms = _critical_path(rid, dags.get(wid), final_task.get(rid), ready_at, done_at)
            if row.exec_total_ms is not None:
                row.fo_ms = row.rrt_ms - row.exec_total_ms
                row.status = COMPLETE
        elif rid in failed_final:
            row.status = FAILED
        rows.append(row)

    detection = []
    undetected = 0
    accepted_malicious = 0
    malicious = [(t, node, d) for t, node, d in proposals if d["malicious"]]
    for t, node, d in malicious:
        if d["txn"] in accepted_txns:
            accepted_malicious += 1
        if d["txn"] in first_rejection:
            detection.append(first_rejection[d["txn"]] - t)
        else:
            undetected += 1

    # recovery: new Active at attempt k, measured from the earliest rejected
    # malicious proposal triggered by attempt k-1 of the same request
    recovery = []
    for rid, t_active in sorted(active.items()):
        k = attempts.get(rid, 1)
        if k < 2:
            continue
        starts = [t for t, _, d in malicious
                  if tuple(d["trigger"]) == (rid, k - 1) and d["txn"] in rejected]
        if starts:
            recovery.append(t_active - min(starts))

    false_pos = sum(1 for signer in rejected_conf_signers.values() if signer not in byzantine)

    return MetricsReport(
        seed=trace.rng_seed,
        config_digest=digest_record(config) if config else "",
        rows=rows,
        detection_latencies_ms=detection,
        recovery_times_ms=recovery,
        message_counts={k: counts.get(k, 0) for k in ("preprepare", "prepare", "commit", "viewchange")},
        rejected_txns=len(rejected),
        false_positives=false_pos,
        malicious_proposals=len(malicious),
        undetected_malicious=undetected,
        accepted_malicious=accepted_malicious,
        bad_signatures=bad_sigs,
        exploratory=exploratory,
        latency_note=latency_note(config.get("latency", {})),
    )


def _critical_path(rid, doc, last_task, ready_at, done_at) -> Optional[float]:
    """Execution makespan along the critical path of one request.

    Walks back from the finalizing task, always following the predecessor that
    finished last, and returns ``done(last) - ready(root)``. Task run times and
    the inter-task hand-offs (completion notice plus input fetch) are both
    attributed to execution.
    """
    if doc is None or last_task is None:
        return None
    preds: dict[str, list[str]] = {t["task_id"]: [] for t in doc["tasks"]}
    for a, b in doc.get("edges", []):
        preds[b].append(a)
    end = done_at.get((rid, last_task))
    if end is None:
        return None
    task = last_task
    while True:
        if (rid, task) not in done_at or (rid, task) not in ready_at:
            return None
        ps = [p for p in preds[task] if (rid, p) in done_at]
        if not ps:
            return end - ready_at[(rid, task)]
        task = min(ps, key=lambda p: (-done_at[(rid, p)], p))


# -- emission -------------------------------------------------------------------

def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in report.rows:
        w.writerow(row.csv_values())
    return buf.getvalue()


def _fmt_stats(s: dict) -> str:
    if not s["n"]:
        return "n=0"
    return f"n={s['n']} mean={s['mean']:.3f} std={s['std']:.3f} min={s['min']:.3f} max={s['max']:.3f}"


def report_text(report: MetricsReport) -> str:
    a = report.aggregates
    lines = [
        f"seed: {report.seed}",
        f"config digest: {report.config_digest}",
        f"note: {report.latency_note}",
    ]
    if report.exploratory:
        lines.append("warning: faulty nodes exceed f; safety is not guaranteed for this run")
    lines += [
        "",
        "aggregates",
        f"  requests: {a['requests']} (complete {a['complete']}, failed {a['failed']}, incomplete {a['incomplete']})",
        f"  rrt_ms: {_fmt_stats(a['rrt_ms'])}",
        f"  fo_ms: {_fmt_stats(a['fo_ms'])}",
        f"  detection_latency_ms: {_fmt_stats(a['detection_latency_ms'])}",
        f"  recovery_time_ms: {_fmt_stats(a['recovery_time_ms'])}",
        "  consensus_messages: " + ", ".join(f"{k}={v}" for k, v in a["consensus_messages"].items()),
        f"  consensus_messages_per_request: {a['consensus_messages_per_request']}",
        f"  rejected_txns: {a['rejected_txns']}",
        f"  malicious_proposals: {a['malicious_proposals']} (undetected {a['undetected_malicious']}, "
        f"accepted {a['accepted_malicious']})",
        f"  false_positives: {a['false_positives']}",
        f"  bad_signatures: {a['bad_signatures']}",
    ]
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, fmt: str, path=None) -> str:
    """Render ``report`` as ``csv`` or ``text``; writes to ``path`` when given."""
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "text":
        text = report_text(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise IoFailure(f"cannot write report to {path}: {exc}") from exc
    return text
