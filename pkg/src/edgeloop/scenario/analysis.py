"""Offline trace analysis: recompute latencies from raw timestamps and cross-check the run summary."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..rmo import ORCH_HEADER
from ..robot import ROBOT_HEADER
from ..ttwifi import TRACE_HEADER
from .runner import LATENCY_HEADER, latency_stats

PERCENTILES = (50, 90, 99, 100)
COMPONENTS = {
    "sense_and_uplink_wait": ("t_sense_start", "t_tx_start"),
    "uplink": ("t_tx_start", "t_rx_edge"),
    "compute": ("t_rx_edge", "t_compute_done"),
    "downlink_and_vote": ("t_compute_done", "t_cmd_rx_robot"),
}


class TraceFormatError(ValueError):
    pass


def read_csv(path: Path, header: list[str]) -> list[list[str]]:
    """Rows of a trace file after checking its header and field counts."""
    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    if not lines:
        raise TraceFormatError(f"{path.name}: line 1: empty file")
    if lines[0] != header:
        raise TraceFormatError(f"{path.name}: line 1: unexpected header {lines[0]}")
    for n, row in enumerate(lines[1:], start=2):
        if len(row) != len(header):
            raise TraceFormatError(f"{path.name}: line {n}: expected {len(header)} fields, found {len(row)}")
    return lines[1:]


def read_latency(path: Path) -> list[dict]:
    out = []
    for n, row in enumerate(read_csv(path, LATENCY_HEADER), start=2):
        try:
            rec = {k: int(v) for k, v in zip(LATENCY_HEADER[:7], row[:7])}
            rec["bound"] = float(row[7])
            rec["within_bound"] = bool(int(row[8]))
        except ValueError as exc:
            raise TraceFormatError(f"{path.name}: line {n}: {exc}") from None
        out.append(rec)
    return out


def percentiles(values, qs=PERCENTILES) -> dict[str, float]:
    if len(values) == 0:
        return {f"p{q}": None for q in qs}
    arr = np.asarray(values, dtype=float)
    return {f"p{q}": float(np.percentile(arr, q)) for q in qs}


def analyze(trace_dir) -> dict:
    d = Path(trace_dir)
    if not (d / "latency.csv").is_file():
        raise TraceFormatError(f"{d}: no latency.csv")
    records = read_latency(d / "latency.csv")
    mismatches = []
    for rec in records:
        e2e = rec["t_cmd_rx_robot"] - rec["t_sense_start"]
        stamps = [rec[k] for k in LATENCY_HEADER[1:6]]
        if e2e != rec["e2e"]:
            mismatches.append(f"round {rec['round']}: e2e {rec['e2e']} != recomputed {e2e}")
        if (e2e <= rec["bound"]) != rec["within_bound"]:
            mismatches.append(f"round {rec['round']}: within_bound flag disagrees with e2e")
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            mismatches.append(f"round {rec['round']}: timestamps decrease")
        rec["e2e"] = e2e
    e2e = [r["e2e"] for r in records]
    report = {
        **latency_stats(e2e, [r["bound"] for r in records]),
        "bound_us": records[0]["bound"] if records else None,
        "percentiles_us": percentiles(e2e),
        "components_us": {
            name: {"mean": float(np.mean(v)) if v else None, "max": int(max(v)) if v else None}
            for name, (a, b) in COMPONENTS.items()
            for v in [[r[b] - r[a] for r in records]]
        },
        "record_mismatches": mismatches,
    }
    if (d / "network.csv").is_file():
        rows = read_csv(d / "network.csv", TRACE_HEADER)
        report["collisions"] = sum(1 for r in rows if r[1] == "collision")
        report["schedule_violations"] = sum(1 for r in rows if r[1] == "violation")
    if (d / "orchestration.csv").is_file():
        rows = read_csv(d / "orchestration.csv", ORCH_HEADER)
        report["quorum_failures"] = sum(1 for r in rows if r[1] == "no_quorum")
    if (d / "robot.csv").is_file():
        rows = read_csv(d / "robot.csv", ROBOT_HEADER)
        report["halted_rounds"] = sum(1 for r in rows if r[5].startswith("halt"))
    if (d / "summary.json").is_file():
        summary = json.loads((d / "summary.json").read_text())
        keys = [k for k in ("completed_rounds", "max_e2e_us", "mean_e2e_us", "bound_violations", "collisions",
                            "schedule_violations", "quorum_failures", "halted_rounds") if k in report]
        diff = [k for k in keys if summary.get(k) != report[k]]
        report["summary_mismatches"] = diff
        report["matches_summary"] = not diff and not mismatches
    return report


def format_report(report: dict) -> str:
    lines = [f"rounds with command: {report['completed_rounds']}  bound: {report['bound_us']} us"]
    lines.append("e2e percentiles (us): " + "  ".join(
        f"{k}={v:.1f}" if v is not None else f"{k}=-" for k, v in report["percentiles_us"].items()))
    lines.append(f"{'component':<24}{'mean_us':>14}{'max_us':>12}")
    for name, c in report["components_us"].items():
        mean = f"{c['mean']:.1f}" if c["mean"] is not None else "-"
        lines.append(f"{name:<24}{mean:>14}{str(c['max']):>12}")
    for k in ("bound_violations", "collisions", "schedule_violations", "quorum_failures", "halted_rounds"):
        if k in report:
            lines.append(f"{k}: {report[k]}")
    if "matches_summary" in report:
        lines.append(f"matches summary.json: {report['matches_summary']}")
    return "\n".join(lines)
