"""Command line: run a scenario, print its latency bound, analyze traces, sweep the contention model."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace

from .rmo import exec_time
from .scenario import ConfigError, TraceFormatError, analyze, default_scenario_path, e2e_bound, format_report, load_scenario, run
from .scenario.bound import REFERENCE_BURST_US, REFERENCE_SENSOR_PAYLOAD
from .ttwifi import burst_tx_bound, calibrate_overhead

EXIT_OK, EXIT_ERROR, EXIT_VIOLATIONS = 0, 1, 2


def int_range(text: str) -> list[int]:
    """Parse ``"1..4"`` or ``"1,2,4"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1..4 or a list like 1,2,4, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"range {text!r} must be non-empty and positive")
    return values


def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    if args.rounds is not None:
        cfg = cfg.with_(rounds=args.rounds)
    if args.workers is not None:
        cfg = cfg.with_(mcl=replace(cfg.mcl, workers=args.workers))
    result = run(cfg, seed=args.seed, out_dir=args.out)
    s = result.summary
    print(f"{s['scenario']} seed={s['seed']}: {s['completed_rounds']}/{s['rounds']} rounds commanded, "
          f"{s['halted_rounds']} halted, max e2e {s['max_e2e_us']} us (bound {s['bound_us']} us), "
          f"{s['bound_violations']} bound violations, {s['collisions']} collisions")
    if args.out:
        print(f"traces written to {args.out}")
    return EXIT_VIOLATIONS if s["bound_violations"] else EXIT_OK


def calibration_report(cfg) -> dict:
    radio = cfg.radio
    configured = burst_tx_bound(REFERENCE_SENSOR_PAYLOAD, radio)
    ov, fitted, residual = calibrate_overhead(REFERENCE_SENSOR_PAYLOAD, REFERENCE_BURST_US, radio)
    return {
        "reference_burst_us": REFERENCE_BURST_US,
        "payload_bytes": REFERENCE_SENSOR_PAYLOAD,
        "zero_overhead_burst_us": round(burst_tx_bound(REFERENCE_SENSOR_PAYLOAD, replace(radio, overhead_bytes=0)), 4),
        "configured_overhead_bytes": radio.overhead_bytes,
        "configured_burst_us": round(configured, 4),
        "configured_residual_us": round(configured - REFERENCE_BURST_US, 4),
        "best_fit_overhead_bytes": ov,
        "best_fit_burst_us": round(fitted, 4),
        "best_fit_residual_us": round(residual, 4),
    }


def cmd_bound(args) -> int:
    cfg = load_scenario(args.scenario)
    out = e2e_bound(cfg).as_dict()
    out["calibration"] = calibration_report(cfg)
    print(json.dumps(out, indent=2))
    cal = out["calibration"]
    print(f"uplink burst {cal['configured_burst_us']} us vs reference {cal['reference_burst_us']} us: "
          f"residual {cal['configured_residual_us']:+.2f} us at {cal['configured_overhead_bytes']} B overhead; "
          f"best fit {cal['best_fit_overhead_bytes']} B leaves {cal['best_fit_residual_us']:+.2f} us",
          file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args) -> int:
    report = analyze(args.trace)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(format_report(report))
    if report["record_mismatches"] or report.get("summary_mismatches"):
        for m in report["record_mismatches"] + report.get("summary_mismatches", []):
            print(f"mismatch: {m}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_VIOLATIONS if report["bound_violations"] else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_scenario(args.scenario)
    spec = cfg.mcl_spec
    alpha = cfg.contention_alpha if args.alpha is None else args.alpha
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["cores", "instances", "co_runners", "exec_time_us"])
        for cores in args.cores:
            for n in args.instances:
                w.writerow([cores, n, n - 1, f"{exec_time(spec, cores, n - 1, alpha):.3f}"])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgeloop", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    default = str(default_scenario_path())

    r = sub.add_parser("run", help="run the closed-loop scenario")
    r.add_argument("--scenario", default=default)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None, help="directory for trace files")
    r.add_argument("--rounds", type=int, default=None)
    r.add_argument("--workers", type=int, default=None)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bound", help="print the end-to-end latency budget as JSON")
    b.add_argument("--scenario", default=default)
    b.set_defaults(func=cmd_bound)

    a = sub.add_parser("analyze", help="recompute latencies from a trace directory")
    a.add_argument("--trace", required=True)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="execution time over core counts and parallel instances")
    s.add_argument("--scenario", default=default)
    s.add_argument("--cores", type=int_range, default=[1, 2, 3, 4])
    s.add_argument("--instances", type=int_range, default=[1, 2, 3, 4])
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TraceFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
