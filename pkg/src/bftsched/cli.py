"""Command line: ``run``, ``replay`` and ``sweep``."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .harness import InvalidConfig, ScenarioConfig, power_law_exponent, run_scenario, sweep
from .metrics import compute_metrics, emit_report, report_csv
from .simnet import Trace


def _load(path: str, seed) -> ScenarioConfig:
    cfg = ScenarioConfig.load(path)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = _load(args.scenario, args.seed)
    trace, report = run_scenario(cfg)
    out = _out_dir(args, os.path.join("out", cfg.name))
    trace.write(out / "trace.jsonl")
    formats = ["csv", "text"] if args.format == "both" else [args.format]
    for fmt in formats:
        emit_report(report, fmt, out / ("report.csv" if fmt == "csv" else "report.txt"))
    print(emit_report(report, "text"), end="")
    print(f"wrote {out}")
    return 0


def cmd_replay(args) -> int:
    path = Path(args.trace)
    original = path.read_text(encoding="utf-8") if not str(path).endswith(".gz") else None
    trace = Trace.read(path)
    if original is None:
        original = trace.to_jsonl()
    if trace.config is None:
        print("trace has no embedded config; cannot replay", file=sys.stderr)
        return 2
    cfg = ScenarioConfig.from_dict(trace.config)
    if cfg.seed != trace.rng_seed:
        cfg = cfg.replace(seed=trace.rng_seed)
    new_trace, new_report = run_scenario(cfg)
    same_trace = new_trace.to_jsonl() == original
    same_csv = report_csv(new_report) == report_csv(compute_metrics(trace))
    if args.out_dir:
        out = _out_dir(args, args.out_dir)
        new_trace.write(out / "replayed_trace.jsonl")
        emit_report(new_report, "csv", out / "replayed_report.csv")
    print(f"trace: {'identical' if same_trace else 'DIFFERENT'}")
    print(f"csv: {'identical' if same_csv else 'DIFFERENT'}")
    return 0 if same_trace and same_csv else 1


def cmd_sweep(args) -> int:
    cfg = _load(args.scenario, args.seed)
    nodes = [int(x) for x in args.nodes.split(",") if x.strip()]
    points = sweep(cfg, nodes)
    lines = ["nodes,f,messages_per_request,mean_rrt_ms,complete,requests"]
    for p in points:
        rrt = "" if p.mean_rrt_ms is None else f"{p.mean_rrt_ms:.3f}"
        lines.append(f"{p.nodes},{p.f},{p.messages_per_request:.1f},{rrt},{p.complete},{p.requests}")
    text = "\n".join(lines) + "\n"
    if len(points) >= 2 and all(p.messages_per_request > 0 for p in points):
        exponent = power_law_exponent([p.nodes for p in points], [p.messages_per_request for p in points])
        summary = f"message-count power-law exponent: {exponent:.3f}\n"
    else:
        summary = ""
    out = _out_dir(args, os.path.join("out", f"{cfg.name}-sweep"))
    (out / "sweep.csv").write_text(text, encoding="utf-8")
    print(text + summary, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bftsched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out-dir", default=None, help="directory for traces and reports")
        p.add_argument("--format", choices=["csv", "text", "both"], default="both")

    p = sub.add_parser("run", help="run one scenario file")
    p.add_argument("scenario")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="rerun a trace from its embedded seed and config and compare")
    p.add_argument("trace")
    common(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sweep", help="rerun a scenario across cluster sizes")
    p.add_argument("--nodes", default="4,7,10,16")
    p.add_argument("scenario")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        for err in exc.errors:
            print(f"invalid config: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
