"""Acceptance gate: one marked group per criterion, summarized as PASS/FAIL lines at the end of the run."""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from edgeloop import rmo
from edgeloop.cli import main
from edgeloop.planner import NoPathError, astar
from edgeloop.robot import DEFAULT_TASKSET, TaskSpec, response_time
from edgeloop.scenario import e2e_bound, run
from edgeloop.scenario.bound import REFERENCE_BURST_US, REFERENCE_SENSOR_PAYLOAD
from edgeloop.scenario.config import Fault
from edgeloop.ttwifi import burst_tx_bound, calibrate_overhead, fragment, fta_sync
from edgeloop.worldmodel import MoveCommand, OccupancyGrid, measurement_duration, sensor_payload_bytes

from harness import overlaps, tdma_stress
from oracles import bfs_cost, busy_period_response


def _rows(result, name):
    return list(csv.DictReader(io.StringIO(result.traces[name])))


# 1


@pytest.mark.criterion(1, "payload math")
def test_payload_math(default_cfg, evidence):
    t0 = time.perf_counter()
    assert sensor_payload_bytes(366) == 5888
    assert fragment(5888, default_cfg.radio) == 3
    assert measurement_duration(366, 0.5) == 183_000
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    evidence("5888 B, 3 frames, 183000 us")


# 2


@pytest.mark.criterion(2, "transmission bound and overhead calibration")
def test_zero_overhead_burst(default_cfg, evidence):
    value = burst_tx_bound(5888, replace(default_cfg.radio, overhead_bytes=0))
    assert value == pytest.approx(120.76, abs=0.01)
    evidence(f"zero overhead {value:.2f} us")


@pytest.mark.criterion(2, "transmission bound and overhead calibration")
def test_calibrated_burst(default_cfg, evidence):
    configured = burst_tx_bound(REFERENCE_SENSOR_PAYLOAD, default_cfg.radio)
    assert abs(configured - REFERENCE_BURST_US) <= 0.5
    ov, fitted, residual = calibrate_overhead(REFERENCE_SENSOR_PAYLOAD, REFERENCE_BURST_US, default_cfg.radio)
    assert abs(residual) <= 0.5
    evidence(f"configured {configured:.2f} us at {default_cfg.radio.overhead_bytes} B, best fit {ov} B -> {fitted:.2f} us")


@pytest.mark.criterion(2, "transmission bound and overhead calibration")
def test_bound_prints_residual(capsys):
    assert main(["bound"]) == 0
    err = capsys.readouterr().err
    assert "residual" in err and f"{REFERENCE_BURST_US}" in err


# 3


@pytest.mark.criterion(3, "TDMA no-collision property")
def test_tdma_within_guard_never_collides(evidence):
    t0 = time.perf_counter()
    net = tdma_stress(10_000, nodes=5)
    elapsed = time.perf_counter() - t0
    assert len(net.collisions) == 0 and overlaps(net) == []
    assert len(net.bursts) == 50_000
    assert elapsed < 30
    evidence(f"10000 cycles, 0 collisions in {elapsed:.1f} s")


@pytest.mark.criterion(3, "TDMA no-collision property")
def test_tdma_error_beyond_guard_collides(evidence):
    t0 = time.perf_counter()
    net = tdma_stress(2_000, nodes=5, forced={2: -40})
    elapsed = time.perf_counter() - t0
    assert len(net.collisions) >= 1
    assert elapsed < 30
    evidence(f"forced -40 us: {len(net.collisions)} collisions")


# 4


@pytest.mark.criterion(4, "FTA robustness")
def test_fta_two_adversaries(evidence):
    rng = np.random.default_rng(4)
    for _ in range(1000):
        correct = [int(v) for v in rng.integers(-200, 201, 5)]
        bad = [int(s) * 10**6 for s in rng.choice([-1, 1], 2)]
        est = correct + bad
        rng.shuffle(est)
        out = fta_sync(est, k=2)
        assert min(correct) <= out <= max(correct)
    evidence("1000 rounds")


# 5


@pytest.fixture(scope="module")
def seed_runs(default_cfg):
    return {seed: run(default_cfg, seed=seed) for seed in range(1, 11)}


@pytest.mark.criterion(5, "MCL convergence")
def test_mcl_converges_on_most_seeds(seed_runs, evidence):
    finals = {s: r.summary["localization"]["final_error_cells"] for s, r in seed_runs.items()}
    good = [s for s, e in finals.items() if e is not None and e < 2.0]
    worst = max(finals.values(), key=lambda e: -1 if e is None else e)
    evidence(f"{len(good)}/10 seeds below 2 cells after round 30, worst {worst:.1f}")
    assert len(good) >= 9


@pytest.mark.criterion(5, "MCL convergence")
def test_population_constant(seed_runs, default_cfg):
    n = default_cfg.mcl.particle_count
    assert n == 2000 and default_cfg.grid.cells.shape == (40, 40)
    for r in seed_runs.values():
        rows = [row for row in _rows(r, "localization.csv") if row["particles"]]
        assert rows and all(int(row["particles"]) == n for row in rows)


@pytest.mark.criterion(5, "MCL convergence")
def test_worker_count_does_not_change_traces(default_cfg, seed_runs):
    eight = run(default_cfg.with_(mcl=replace(default_cfg.mcl, workers=8)), seed=1)
    assert eight.traces == seed_runs[1].traces


# 6


@pytest.mark.criterion(6, "A* oracle equivalence")
def test_astar_matches_bfs(evidence):
    rng = np.random.default_rng(6)
    solvable = unreachable = 0
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(2, 31, 2))
        cells = rng.random((h, w)) < rng.uniform(0.0, 0.45)
        free = np.argwhere(~cells)
        if len(free) == 0:
            cells[0, 0] = False
            free = np.argwhere(~cells)
        start, goal = (tuple(int(v) for v in free[rng.integers(len(free))]) for _ in range(2))
        want = bfs_cost(cells, start, goal)
        if want is None:
            unreachable += 1
            with pytest.raises(NoPathError):
                astar(OccupancyGrid(cells, 1.0), start, goal)
        else:
            solvable += 1
            assert astar(OccupancyGrid(cells, 1.0), start, goal).cost == want
    evidence(f"{solvable} solvable, {unreachable} unreachable")


# 7


def _variants(good: MoveCommand) -> list:
    """Outputs a faulty replica might produce, including silence and a copy of the correct value."""
    return [
        None,
        good,
        replace(good, v=good.v + 0.001),
        replace(good, omega=-good.omega - 0.5),
        replace(good, duration_ms=good.duration_ms + 1),
        MoveCommand(0.0, 0.0, 0, good.sequence),
        MoveCommand(-1.0, 2.0, 1999, good.sequence),
    ]


@pytest.mark.criterion(7, "voting masks faults")
def test_vote_exhaustive_single_fault(evidence):
    good = MoveCommand(0.25, 0.4, 800, 7)
    ids = ["r0", "r1", "r2"]
    cases = 0
    for faulty in [None, *ids]:
        for bad in _variants(good) if faulty else [good]:
            outputs = [(i, bad if i == faulty else good) for i in ids]
            outputs = [(i, c) for i, c in outputs if c is not None]
            for perm in itertools.permutations(outputs):
                assert rmo.quantize(rmo.vote(list(perm), expected=3)) == rmo.quantize(good)
                cases += 1
    evidence(f"{cases} orderings")


@pytest.mark.criterion(7, "voting masks faults")
def test_vote_all_distinct_is_no_quorum():
    outs = [("r0", MoveCommand(0.1, 0, 100)), ("r1", MoveCommand(0.2, 0, 100)), ("r2", MoveCommand(0.3, 0, 100))]
    for perm in itertools.permutations(outs):
        assert rmo.vote(list(perm), expected=3) is None


@pytest.mark.criterion(7, "voting masks faults")
def test_all_distinct_outputs_halt_the_robot(default_cfg, evidence):
    faults = tuple(Fault(1_000_000, "byzantine", f"mcl#{i}") for i in range(3))
    r = run(default_cfg.with_(rounds=5, faults=faults))
    orch = _rows(r, "orchestration.csv")
    first_nq = min(int(row["true_time_us"]) for row in orch if row["event"] == "no_quorum")
    halts = [row for row in _rows(r, "robot.csv")
             if row["event"].startswith("halt") and int(row["true_time_us"]) >= first_nq]
    assert halts
    assert r.summary["incorrect_actuations"] == 0
    evidence(f"{r.summary['quorum_failures']} no-quorum rounds, {r.summary['halted_rounds']} halts")


# 8


@pytest.mark.criterion(8, "crash re-orchestration")
@pytest.mark.parametrize("node, at", [("e1", 2_000_000), ("e2", 241_000), ("e3", 3_050_000)])
def test_crash_restores_replicas(default_cfg, evidence, node, at):
    cfg = default_cfg.with_(faults=(Fault(at, "crash", node),))
    assert cfg.mcl_spec.replicas == 3 and len(cfg.nodes()) == 4
    r = run(cfg)
    [rec] = r.summary["reorchestrations"]
    budget = cfg.orchestration.reorchestration_budget_us
    assert rec["within_budget"] and rec["restored_at"] - at <= budget
    orch = _rows(r, "orchestration.csv")
    placed = {}
    for row in orch:
        if row["event"] == "place" and row["subject"].startswith("mcl#") and int(row["true_time_us"]) <= at + budget:
            placed[row["subject"]] = row["detail"]
    assert len(placed) == 3 and node not in placed.values()
    assert r.summary["incorrect_actuations"] == 0
    votes = sum(1 for row in orch if row["event"] == "vote")
    actuations = sum(1 for row in _rows(r, "robot.csv") if row["event"].startswith("actuate "))
    assert actuations <= votes
    evidence(f"{node} at {at} us restored in {rec['latency_us']} us")


# 9


@pytest.mark.criterion(9, "end-to-end bound")
def test_nominal_within_bound_and_tight(default_cfg, evidence):
    r = run(default_cfg)
    s = r.summary
    bound = e2e_bound(default_cfg).total
    assert s["completed_rounds"] == 30
    assert all(rec.e2e <= bound for rec in r.latency)
    assert s["bound_violations"] == 0
    ratio = s["max_e2e_us"] / bound
    assert ratio >= 0.75
    evidence(f"worst {s['max_e2e_us']} us of {bound:.2f} us ({ratio:.1%})")


# 10


def _random_harmonic(rng) -> list[TaskSpec]:
    n = int(rng.integers(1, 6))
    period = int(rng.choice([4, 5, 10, 20]))
    tasks = []
    for i in range(n):
        if i:
            period *= int(rng.choice([1, 2, 3, 4]))
        tasks.append(TaskSpec(f"t{i}", period, int(rng.integers(1, max(1, period // 2) + 1)), int(rng.integers(0, 4))))
    return [tasks[j] for j in rng.permutation(n)]


@pytest.mark.criterion(10, "response-time analysis")
def test_default_taskset_schedulable(evidence):
    rs = [response_time(DEFAULT_TASKSET, i) for i in range(len(DEFAULT_TASKSET))]
    assert all(r is not None and r <= t.period for r, t in zip(rs, DEFAULT_TASKSET))
    evidence("R = " + ", ".join(str(int(r)) for r in rs))


@pytest.mark.criterion(10, "response-time analysis")
def test_recurrence_matches_busy_period(evidence):
    rng = np.random.default_rng(10)
    checked = misses = 0
    for _ in range(50):
        tasks = _random_harmonic(rng)
        for i in range(len(tasks)):
            want = busy_period_response(tasks, i)
            assert response_time(tasks, i) == want
            checked += 1
            misses += want is None
    evidence(f"50 sets, {checked} tasks, {misses} unschedulable")


# 11


@pytest.mark.criterion(11, "determinism")
@pytest.mark.parametrize("faults", [(), (Fault(1_000_000, "crash", "e2"), Fault(500_000, "byzantine", "mcl#1"),
                                         Fault(1_500_040, "babble", "e4", duration_us=1_000_000, interval_us=10_000))],
                         ids=["nominal", "faulty"])
def test_byte_identical_traces(default_cfg, tmp_path, faults):
    cfg = default_cfg.with_(rounds=8, faults=faults)
    a, b = tmp_path / "a", tmp_path / "b"
    run(cfg, out_dir=a)
    run(cfg, out_dir=b)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir()) and "events.csv" in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
