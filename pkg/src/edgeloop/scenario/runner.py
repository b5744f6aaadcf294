"""Closed-loop experiment: robot, TDMA network, replicated localization and orchestration on one event loop."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .. import rmo
from ..mcl import LocalizationError, ParticleSet, init_particles, mcl_step
from ..planner import NoPathError, astar, nearest_free, obstacle_check, path_to_command
from ..robot import Action, Mode, RobotTrace, Stimulus, control_loop_step, initial_state
from ..simkern import EventKind, NodeClock, Simulator
from ..ttwifi import (
    ClockSync,
    FrameKind,
    Network,
    burst_tx_bound,
    frame_tx_time,
    make_frames,
    next_slot,
)
from ..worldmodel import (
    MoveCommand,
    OdometryReading,
    Pose,
    apply_motion,
    decode_sensor_message,
    encode_sensor_message,
    generate_scan,
    halt_command,
    measurement_duration,
    sensor_payload_bytes,
)
from .bound import COMMAND_BYTES, comm_timeout, e2e_bound
from .config import ConfigError, ScenarioConfig

LATENCY_HEADER = ["round", "t_sense_start", "t_tx_start", "t_rx_edge", "t_compute_done", "t_cmd_rx_robot",
                  "e2e", "bound", "within_bound"]
LOCALIZATION_HEADER = ["round", "true_x", "true_y", "est_x", "est_y", "error_cells", "particles"]
SYNC_PAYLOAD = 8


@dataclass
class LatencyRecord:
    round: int
    t_sense_start: int
    t_tx_start: int
    t_rx_edge: int
    t_compute_done: int
    t_cmd_rx_robot: int
    bound: float

    @property
    def e2e(self) -> int:
        return self.t_cmd_rx_robot - self.t_sense_start

    @property
    def within_bound(self) -> bool:
        return self.e2e <= self.bound

    def row(self) -> list:
        return [self.round, self.t_sense_start, self.t_tx_start, self.t_rx_edge, self.t_compute_done,
                self.t_cmd_rx_robot, self.e2e, f"{self.bound:.2f}", int(self.within_bound)]


@dataclass
class _Replica:
    instance: str
    node: Optional[str]
    live: bool = True
    pset: Optional[ParticleSet] = None
    round_done: int = 0
    incarnation: int = 0
    busy_until: int = -1
    queue: list = field(default_factory=list)
    restarting: bool = False


@dataclass
class RunResult:
    summary: dict
    latency: list[LatencyRecord]
    traces: dict[str, str]

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in self.traces.items():
            (out / name).write_text(text)
        return out


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def latency_stats(e2e: list[int], bounds: list[float]) -> dict:
    """Summary statistics shared by the runner and trace analysis."""
    if not e2e:
        return {"completed_rounds": 0, "max_e2e_us": None, "mean_e2e_us": None, "bound_violations": 0}
    return {
        "completed_rounds": len(e2e),
        "max_e2e_us": int(max(e2e)),
        "mean_e2e_us": round(sum(e2e) / len(e2e), 3),
        "bound_violations": sum(1 for e, b in zip(e2e, bounds) if e > b),
    }


class ClosedLoop:
    def __init__(self, cfg: ScenarioConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else int(seed)
        self.sim = Simulator(self.seed, trace=cfg.trace_events)
        self.grid = cfg.grid
        self.schedule = cfg.schedule()
        self.robot_id = cfg.robot.id
        self.budget = e2e_bound(cfg)
        self.bound = self.budget.total
        self.timeout = comm_timeout(cfg)
        self.sense_us = measurement_duration(cfg.robot.sample_count, cfg.robot.ms_per_sample)
        self.members = self.schedule.owners
        self._validate_slots()

        self.clocks = self._make_clocks()
        self.net = Network(self.sim, self.schedule, cfg.radio, self.clocks, cfg.tdma.enforcement,
                           rng=self.sim.rng("net-loss"))
        self.sync = ClockSync(self.clocks, cfg.radio, cfg.tdma.sync_k)
        for m in self.members:
            self.net.attach(m, self._handler(m))

        self.specs = list(cfg.containers)
        self.spec = cfg.mcl_spec
        self.nodes = cfg.nodes()
        self.node_by_id = {n.id: n for n in self.nodes}
        self.orch = rmo.OrchestrationTrace()
        try:
            self.placement = rmo.lrm_place(self.specs, self.nodes)
        except rmo.InfeasiblePlacement as exc:
            raise ConfigError(str(exc)) from None
        by_name = {s.name: s for s in self.specs}
        self.lrms = {n.id: rmo.LocalResourceManager(n, by_name, cfg.orchestration.overrun_limit) for n in self.nodes}
        self._sync_lrms()
        for inst, node in self.placement.mapping.items():
            self.orch.add(0, "place", inst, node)
        for inst in self.placement.unplaced:
            self.orch.add(0, "place", inst, "unplaced")
        self.replicas = {i: _Replica(i, self.placement.mapping.get(i)) for i in self.spec.instances()}
        self.admitted_co = rmo.worst_case_co_runners(self.nodes, self.specs)
        self.exec_budget = rmo.exec_time(self.spec, self.spec.cores_demand, self.admitted_co, cfg.contention_alpha)

        self.outbox: dict[str, list] = {m: [] for m in self.members}
        self.rx_parts: dict[str, dict[int, dict[int, bytes]]] = {m: {} for m in self.members}
        self.rx_done: dict[str, set[int]] = {m: set() for m in self.members}
        self.cache: dict = {}
        self.correct: dict[int, tuple] = {}

        self.state = initial_state(cfg.robot.start_pose, self.timeout)
        self.rtrace = RobotTrace()
        self.scan = None
        self.odom = OdometryReading(0.0, 0.0, 0.0)
        self.pending_cmd: Optional[MoveCommand] = None
        self.seen_cmd: set = set()
        self.outputs: dict[int, dict[str, MoveCommand]] = {}
        self.voted: set[int] = set()
        self.no_quorum: set[int] = set()
        self.marks: dict[int, dict] = {}
        self.latency: list[LatencyRecord] = []
        self.loc_rows: list[list] = []
        self.completed = 0
        self.halted_rounds = 0
        self.finished = False
        self.incorrect = 0
        self.blocked = 0
        self.reorch: list[dict] = []
        self.pending_restore: dict[str, dict] = {}
        self.max_clock_error = 0.0
        self.max_clock_skew = 0.0
        self.horizon = cfg.rounds * (self.timeout + 4_000_000)

    # setup

    def _validate_slots(self) -> None:
        radio = self.cfg.radio
        rep = self.cfg.tdma.replication
        sync = frame_tx_time(make_frames("x", bytes(SYNC_PAYLOAD), radio, FrameKind.SYNC)[0], radio)
        need = {self.robot_id: burst_tx_bound(sensor_payload_bytes(self.cfg.robot.sample_count), radio, rep) + sync}
        for n in self.cfg.node_ids:
            need[n] = burst_tx_bound(COMMAND_BYTES, radio, rep) + sync
        try:
            self.schedule.validate(need)
        except ValueError as exc:
            raise ConfigError(f"tdma: {exc}") from None

    def _make_clocks(self) -> dict[str, NodeClock]:
        t = self.cfg.tdma
        rng = self.sim.rng("clocks")
        n = len(self.members)
        offsets = rng.uniform(-t.max_clock_error, t.max_clock_error, n)
        drift = rng.uniform(-t.drift_ppm, t.drift_ppm, n)
        drift -= drift.mean()
        return {m: NodeClock(float(offsets[i]), float(drift[i]), 0) for i, m in enumerate(self.members)}

    def _sync_lrms(self) -> None:
        for nid, lrm in self.lrms.items():
            lrm.host(self.placement.on_node(nid))

    # event plumbing

    def _at(self, t: int, target: str, kind: EventKind, fn, detail: str = "", data=None) -> int:
        return self.sim.schedule(max(int(t), self.sim.now), target, kind, fn, detail, data)

    def _first_slots(self) -> None:
        for m in self.members:
            local = next_slot(self.schedule, m, self.clocks[m].local_time(0))
            self._schedule_slot(m, local)

    def _schedule_slot(self, node: str, local: int) -> None:
        t = math.ceil(self.clocks[node].to_true(local) - 1e-9)
        self._at(t, node, EventKind.SLOT_START, self._on_slot, f"slot {local}", (node, local))

    def _on_slot(self, ev) -> None:
        node, local = ev.data
        now = self.sim.now
        cyc = self.schedule.cycle_length
        if self.net.up.get(node, False):
            self.max_clock_error = max(self.max_clock_error, abs(self.clocks[node].error(now)))
            errs = [c.error(now) for n, c in self.clocks.items() if self.net.up.get(n, False)]
            self.max_clock_skew = max(self.max_clock_skew, max(errs) - min(errs))
            sync_cycle = (local // cyc) % self.cfg.tdma.sync_every_cycles == 0
            if sync_cycle:
                self.sync.resync(node, now)
            self._send_slot(node, sync_cycle, local // cyc)
        self._schedule_slot(node, next_slot(self.schedule, node, local + 1))

    def _send_slot(self, node: str, sync_cycle: bool, cycle: int) -> None:
        radio = self.cfg.radio
        slot = self.schedule.slots_of(node)[0]
        room = float(slot.length)
        sent, frames = [], []
        queue = self.outbox[node]
        sync = make_frames(node, bytes(SYNC_PAYLOAD), radio, FrameKind.SYNC, seq=cycle) if sync_cycle else []
        room -= sum(frame_tx_time(f, radio) for f in sync)
        while queue:
            tag, fr = queue[0]
            d = sum(frame_tx_time(f, radio) for f in fr)
            if d > room:
                break
            queue.pop(0)
            room -= d
            frames.extend(fr)
            sent.append(tag)
        frames.extend(sync)
        if not frames:
            return
        burst = self.net.transmit(node, frames)
        if burst is None or burst.suppressed:
            return
        for tag in sent:
            if tag[0] == "uplink":
                self.marks.setdefault(tag[1], {})["t_tx_start"] = self.sim.now
                self._robot(Stimulus.UPLINK_SENT)

    def _handler(self, node: str):
        def on_frame(frame, arrive_exact):
            if frame.kind is FrameKind.SYNC:
                self.sync.observe(node, frame, arrive_exact)
            elif node == self.robot_id:
                if frame.kind is FrameKind.COMMAND:
                    self._robot_command(frame)
            elif frame.kind is FrameKind.DATA and frame.src == self.robot_id:
                self._assemble(node, frame)
        return on_frame

    # edge side

    def _assemble(self, node: str, frame) -> None:
        if frame.seq in self.rx_done[node]:
            return
        parts = self.rx_parts[node].setdefault(frame.seq, {})
        parts.setdefault(frame.fragment, frame.content)
        if len(parts) < frame.fragments:
            return
        self.rx_done[node].add(frame.seq)
        msg = b"".join(parts[i] for i in range(frame.fragments))
        del self.rx_parts[node][frame.seq]
        for inst in self.placement.on_node(node):
            rep = self.replicas.get(inst)
            if rep is not None and rep.live:
                m = self.marks.setdefault(frame.seq, {})
                m["t_rx_edge"] = min(m.get("t_rx_edge", self.sim.now), self.sim.now)
                self._enqueue_compute(rep, frame.seq, msg)

    def _enqueue_compute(self, rep: _Replica, round_id: int, msg: bytes) -> None:
        rep.queue.append((round_id, msg))
        if rep.busy_until < 0:
            self._start_compute(rep)

    def _start_compute(self, rep: _Replica) -> None:
        round_id, msg = rep.queue.pop(0)
        donor = self._donor(exclude=rep.instance, before=round_id)
        if donor is not None and donor.round_done > rep.round_done:
            rep.pset, rep.round_done = donor.pset, donor.round_done
        result = self._mcl_result(rep.pset, round_id, msg)
        node = rep.node
        co = max(len(self.placement.on_node(node)) - 1, 0)
        et = rmo.exec_time(self.spec, self.spec.cores_demand, co, self.cfg.contention_alpha)
        et *= self._overrun_factor(rep.instance)
        done = self.sim.now + math.ceil(et - 1e-9)
        rep.busy_until = done
        self._at(done, node, EventKind.CONTAINER_DONE, self._on_done, f"{rep.instance} round={round_id}",
                 (rep.instance, rep.incarnation, round_id, result, self.sim.now))

    def _overrun_factor(self, inst: str) -> float:
        f = 1.0
        for fault in self.cfg.faults:
            if fault.kind == "overrun" and fault.target == inst and fault.active(self.sim.now):
                f *= fault.factor
        return f

    def _on_done(self, ev) -> None:
        inst, inc, round_id, result, started = ev.data
        rep = self.replicas[inst]
        if rep.incarnation != inc or not rep.live or not self.net.up.get(rep.node, False):
            return
        rep.busy_until = -1
        pset, est, cmd = result
        rep.pset, rep.round_done = pset, round_id
        node = rep.node
        now = self.sim.now
        if self.lrms[node].record(inst, now - started, self.exec_budget):
            self._migrate(inst)
        if self._byzantine(inst):
            cmd = self._arbitrary_command(inst, round_id)
        self.marks.setdefault(round_id, {}).setdefault("compute_done", {})[node] = now
        frames = make_frames(node, cmd.to_bytes(), self.cfg.radio, FrameKind.COMMAND, seq=round_id,
                             dst=self.robot_id, replication=self.cfg.tdma.replication)
        if self.net.up.get(node, False) and rep.node == node:
            self.outbox[node].append((("command", round_id), frames))
        if rep.queue:
            self._start_compute(rep)

    def _byzantine(self, inst: str) -> bool:
        return any(f.kind == "byzantine" and f.target == inst and f.active(self.sim.now) for f in self.cfg.faults)

    def _arbitrary_command(self, inst: str, round_id: int) -> MoveCommand:
        rng = self.sim.rng(f"byzantine:{inst}", round_id)
        return MoveCommand(round(float(rng.uniform(-1, 1)), 3), round(float(rng.uniform(-2, 2)), 3),
                           int(rng.integers(100, 2000)), round_id)

    def _donor(self, exclude: Optional[str] = None, before: Optional[int] = None) -> Optional[_Replica]:
        best = None
        for inst in self.spec.instances():
            r = self.replicas[inst]
            if inst == exclude or not r.live or r.node is None or not self.net.up.get(r.node, False):
                continue
            if before is not None and r.round_done >= before:
                continue
            if best is None or r.round_done > best.round_done:
                best = r
        return best

    def _mcl_result(self, pset: Optional[ParticleSet], round_id: int, msg: bytes):
        key = (pset.digest() if pset is not None else b"", round_id)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        cfg = self.cfg
        scan, odom = decode_sensor_message(msg)
        if pset is None:
            pset = init_particles(self.grid, cfg.mcl, self.sim.rng("mcl-init", round_id))
        motion = odom.to_command(cfg.robot.wheel_base, round_id)
        new, est = mcl_step(pset, motion, scan, self.grid, cfg.mcl, self.sim.rng("mcl", round_id))
        if len(new) != cfg.mcl.particle_count:
            raise LocalizationError(f"round {round_id}: population {len(new)} != {cfg.mcl.particle_count}")
        cmd = self._plan(est, scan, round_id)
        result = (new, est, cmd)
        self.cache = {k: v for k, v in self.cache.items() if k[1] >= round_id - 2}
        self.cache[key] = result
        self.correct.setdefault(round_id, (est, cmd, len(new)))
        return result

    def _plan(self, est: Pose, scan, round_id: int) -> MoveCommand:
        grid = self.grid
        start = nearest_free(grid, grid.cell_of(est.x, est.y))
        goal = tuple(self.cfg.robot.goal_cell)
        if start == goal:
            return halt_command(round_id)
        try:
            path = astar(grid, start, goal)
        except NoPathError:
            return halt_command(round_id)
        cmd = path_to_command(path, est, self.cfg.planner, grid.resolution, round_id)
        if not obstacle_check(scan, cmd, self.cfg.planner.safety_margin, self.cfg.planner.half_width):
            return halt_command(round_id)
        return cmd

    # orchestration

    def _monitor(self, ev) -> None:
        now = self.sim.now
        for node in self.nodes:
            report = rmo.monitor_snapshot(self.lrms[node.id])
            if not report.up and node.id not in self._handled:
                self._handled.add(node.id)
                self._reorchestrate(node.id)
        if not self.finished:
            self._at(now + self.cfg.orchestration.monitor_period_us, "rmo", EventKind.TIMER, self._monitor, "monitor")

    def _reorchestrate(self, crashed: str) -> None:
        now = self.sim.now
        old = self.placement
        new = rmo.reorchestrate(old, crashed, self.nodes, self.specs)
        moves = [f"{i}:{old.mapping.get(i, '-')}->{n}" for i, n in new.mapping.items() if old.mapping.get(i) != n]
        self.orch.add(now, "reorchestrate", crashed, " ".join(moves) or "no movable instances")
        self._apply_placement(new)
        for name in sorted(new.degraded - old.degraded):
            self.orch.add(now, "degraded", name, f"no capacity after crash of {crashed}")

    def _migrate(self, inst: str) -> None:
        old = self.placement
        new = rmo.migrate(old, inst, self.nodes, self.specs)
        if new.mapping.get(inst) == old.mapping.get(inst):
            return
        self.orch.add(self.sim.now, "reorchestrate", inst, f"migrate {old.mapping[inst]}->{new.mapping[inst]} (budget overrun)")
        self._apply_placement(new)

    def _apply_placement(self, new: rmo.Placement) -> None:
        now = self.sim.now
        old = self.placement
        self.placement = new
        self._sync_lrms()
        start = self.cfg.orchestration.container_start_us
        for inst, rep in self.replicas.items():
            target = new.mapping.get(inst)
            if target == rep.node and old.mapping.get(inst) == target:
                continue
            rep.node = target
            rep.live = False
            rep.pset = None
            rep.round_done = 0
            rep.busy_until = -1
            rep.queue.clear()
            rep.incarnation += 1
            if target is not None:
                self._at(now + start, target, EventKind.TIMER, self._container_ready, f"start {inst}",
                         (inst, rep.incarnation))

    def _container_ready(self, ev) -> None:
        inst, inc = ev.data
        rep = self.replicas[inst]
        if rep.incarnation != inc or not self.net.up.get(rep.node, False):
            return
        self._bring_up(rep)
        self.orch.add(self.sim.now, "place", inst, rep.node)
        self._check_restored()

    def _bring_up(self, rep: _Replica) -> None:
        donor = self._donor(exclude=rep.instance)
        if donor is not None:
            rep.pset, rep.round_done = donor.pset, donor.round_done
        rep.live = True

    def _live_count(self) -> int:
        return sum(1 for r in self.replicas.values()
                   if r.live and r.node is not None and self.net.up.get(r.node, False))

    def _check_restored(self) -> None:
        if self._live_count() < self.spec.replicas:
            return
        now = self.sim.now
        for node, rec in list(self.pending_restore.items()):
            rec["restored_at"] = now
            rec["latency_us"] = now - rec["crash_at"]
            rec["within_budget"] = rec["latency_us"] <= rec["budget_us"]
            self.reorch.append(rec)
            del self.pending_restore[node]

    # faults

    def _install_faults(self) -> None:
        for i, f in enumerate(self.cfg.faults):
            self._at(f.time_us, f.target, EventKind.CRASH if f.kind == "crash" else EventKind.TIMER,
                     self._fault, f"fault {f.kind}", (i, f))

    def _fault(self, ev) -> None:
        i, f = ev.data
        now = self.sim.now
        if f.kind == "crash":
            node = self.node_by_id[f.target]
            if not node.up:
                return
            node.status = "crashed"
            self.net.up[f.target] = False
            self.outbox[f.target].clear()
            for rep in self.replicas.values():
                if rep.node == f.target:
                    rep.live = False
            self.orch.add(now, "crash", f.target, "node silenced")
            self.pending_restore[f.target] = {"node": f.target, "crash_at": now,
                                              "budget_us": self.cfg.orchestration.reorchestration_budget_us}
        elif f.kind == "clock_step":
            self.clocks[f.target].offset += f.offset_us
        elif f.kind == "babble":
            if f.active(now) and self.net.up.get(f.target, False):
                junk = make_frames(f.target, bytes(f.bytes), self.cfg.radio, FrameKind.DATA, seq=-1)
                self.net.transmit(f.target, junk)
            nxt = now + f.interval_us
            if f.active(nxt) and not self.finished:
                self._at(nxt, f.target, EventKind.TIMER, self._fault, "fault babble", (i, f))
        # byzantine and overrun are consulted when a replica finishes

    def _install_rejuvenation(self) -> None:
        rj = self.cfg.orchestration.rejuvenation
        if rj is None:
            return
        events = rmo.rejuvenate(self.spec.instances(), rj.period_us, rj.stagger_us, rj.restart_us,
                                self.horizon, rj.first_at_us)
        for e in events:
            self._at(e.time, e.instance, EventKind.REJUVENATE, self._rejuvenate, f"{e.phase} {e.instance}", e)

    def _rejuvenate(self, ev) -> None:
        e = ev.data
        rep = self.replicas[e.instance]
        now = self.sim.now
        if e.phase == "start":
            if not rep.live:
                return
            rep.live = False
            rep.pset = None
            rep.round_done = 0
            rep.busy_until = -1
            rep.queue.clear()
            rep.incarnation += 1
            rep.restarting = True
            self.orch.add(now, "rejuvenate_start", e.instance, rep.node or "-")
        elif rep.restarting:
            rep.restarting = False
            if rep.node is not None and self.net.up.get(rep.node, False):
                self._bring_up(rep)
            self.orch.add(now, "rejuvenate_end", e.instance, rep.node or "-")

    # robot side

    def _robot(self, stimulus: Stimulus, **kw) -> None:
        now = self.sim.now
        self.state, actions = control_loop_step(self.state, stimulus, now, **kw)
        for a in actions:
            self._act(a)

    def _act(self, a: Action) -> None:
        now = self.sim.now
        cfg = self.cfg.robot
        r = a.round
        if a.name == "sense":
            self.rtrace.add(now, self.state, "sense_start")
            self.marks.setdefault(r, {})["t_sense_start"] = now
            self.sense_pose = self.state.true_pose
            self.scan = generate_scan(self.grid, self.state.true_pose, cfg.sample_count, cfg.sensor_sigma,
                                      self.sim.rng("lidar", r), cfg.max_range)
            self._at(now + self.sense_us, self.robot_id, EventKind.TIMER,
                     lambda ev, r=r: self._robot(Stimulus.SENSE_DONE), f"sense_done round={r}")
        elif a.name == "arm_timeout":
            self._at(a.at, self.robot_id, EventKind.TIMER, lambda ev, r=r: self._robot(Stimulus.TIMEOUT, round_id=r),
                     f"timeout round={r}")
        elif a.name == "uplink":
            self.rtrace.add(now, self.state, "sense_done")
            stamp = float(self.clocks[self.robot_id].local_time(now))
            odom = OdometryReading(self.odom.left, self.odom.right, stamp, 0.0)
            msg = encode_sensor_message(self.scan, odom)
            frames = make_frames(self.robot_id, msg, self.cfg.radio, FrameKind.DATA, seq=r,
                                 replication=self.cfg.tdma.replication)
            self.outbox[self.robot_id].append((("uplink", r), frames))
        elif a.name == "actuate":
            cmd = a.command
            self.rtrace.add(now, self.state, f"actuate v={cmd.v:g} omega={cmd.omega:g} ms={cmd.duration_ms}")
            correct = self.correct.get(r)
            if correct is None or rmo.quantize(correct[1]) != rmo.quantize(cmd):
                self.incorrect += 1
            self.pending_cmd = cmd
            self._at(now + cmd.duration_ms * 1000, self.robot_id, EventKind.TIMER, self._actuation_done,
                     f"actuation_done round={r}", r)
        elif a.name == "halt":
            self.halted_rounds += 1
            self.outbox[self.robot_id] = [m for m in self.outbox[self.robot_id] if m[0][0] != "uplink"]
            self.odom = OdometryReading(0.0, 0.0, 0.0)
            self.rtrace.add(now, self.state, f"halt {a.reason}")
            if r in self.outputs and r not in self.voted and r not in self.no_quorum:
                self.no_quorum.add(r)
                self.orch.add(now, "no_quorum", f"round {r}", f"{len(self.outputs[r])} outputs at timeout")
            self._record_localization(r)
            self._round_finished()
            if not self.finished:
                self._at(now + cfg.halt_hold_us, self.robot_id, EventKind.TIMER,
                         lambda ev: self._robot(Stimulus.BEGIN), "resume")
        elif a.name == "discard":
            self.rtrace.add(now, self.state, f"discard {a.reason}")

    def _robot_command(self, frame) -> None:
        key = (frame.src, frame.seq)
        if key in self.seen_cmd:
            return
        self.seen_cmd.add(key)
        cmd = MoveCommand.from_bytes(frame.content)
        r = frame.seq
        if r != self.state.round or self.state.mode is not Mode.AWAITING:
            self.rtrace.add(self.sim.now, self.state, f"discard late output from {frame.src} round={r}")
            return
        outs = self.outputs.setdefault(r, {})
        outs[frame.src] = cmd
        if r in self.voted or r in self.no_quorum:
            return
        winner = rmo.vote(list(outs.items()), expected=self.spec.replicas)
        now = self.sim.now
        if winner is not None:
            self.voted.add(r)
            agree = sum(1 for c in outs.values() if rmo.quantize(c) == rmo.quantize(winner))
            self.orch.add(now, "vote", f"round {r}", f"{agree}/{self.spec.replicas} agree")
            m = self.marks.setdefault(r, {})
            done = m.get("compute_done", {})
            m["t_compute_done"] = max((done[s] for s, c in outs.items()
                                       if rmo.quantize(c) == rmo.quantize(winner) and s in done), default=now)
            deliver = now + self.cfg.vote_overhead_us + self.cfg.robot.actuation_grant_us
            self._at(deliver, self.robot_id, EventKind.TIMER, self._deliver, f"command round={r}", (r, winner))
        elif len(outs) >= self.spec.replicas:
            self.no_quorum.add(r)
            self.orch.add(now, "no_quorum", f"round {r}", f"{len(outs)} distinct outputs")

    def _deliver(self, ev) -> None:
        r, cmd = ev.data
        before = self.state.mode
        self._robot(Stimulus.COMMAND, round_id=r, command=cmd)
        if before is Mode.AWAITING and self.state.mode is Mode.ACTUATING:
            m = self.marks[r]
            self.latency.append(LatencyRecord(r, m["t_sense_start"], m["t_tx_start"], m["t_rx_edge"],
                                              m["t_compute_done"], self.sim.now, self.bound))
            self._record_localization(r)

    def _actuation_done(self, ev) -> None:
        r = ev.data
        cmd = self.pending_cmd
        pose = self.state.true_pose
        moved = apply_motion(pose, cmd, self.cfg.robot.motion_noise, self.sim.rng("motion", r))
        mid = Pose((pose.x + moved.x) / 2, (pose.y + moved.y) / 2, moved.theta)
        event = "actuation_done"
        if not (self.grid.is_free_point(moved.x, moved.y) and self.grid.is_free_point(mid.x, mid.y)):
            self.blocked += 1
            moved = pose
            event = "blocked"
            self.odom = OdometryReading(0.0, 0.0, 0.0)
        else:
            self.odom = OdometryReading.from_command(cmd, self.cfg.robot.wheel_base, 0.0)
        self.state = replace(self.state, true_pose=moved)
        self.rtrace.add(self.sim.now, self.state, event)
        self._round_finished()
        if not self.finished:
            self._robot(Stimulus.ACTUATION_DONE)

    def _round_finished(self) -> None:
        self.completed += 1
        if self.completed >= self.cfg.rounds:
            self.finished = True

    def _record_localization(self, r: int) -> None:
        if any(row[0] == r for row in self.loc_rows):
            return
        truth = self.sense_pose
        res = self.grid.resolution
        corr = self.correct.get(r)
        if corr is None:
            self.loc_rows.append([r, f"{truth.x:.6f}", f"{truth.y:.6f}", "", "", "", ""])
            return
        est = corr[0]
        err = math.hypot(est.x - truth.x, est.y - truth.y) / res
        self.loc_rows.append([r, f"{truth.x:.6f}", f"{truth.y:.6f}", f"{est.x:.6f}", f"{est.y:.6f}", f"{err:.6f}",
                              corr[2]])

    # driver

    def run(self) -> RunResult:
        self._handled: set[str] = set()
        self._first_slots()
        self._install_faults()
        self._install_rejuvenation()
        self._at(self.cfg.orchestration.monitor_period_us, "rmo", EventKind.TIMER, self._monitor, "monitor")
        self._at(0, self.robot_id, EventKind.TIMER, lambda ev: self._robot(Stimulus.BEGIN), "start")
        self.sim.run(until=self.horizon, stop=lambda: self.finished)
        return self._result()

    def _result(self) -> RunResult:
        lat = self.latency
        stats = latency_stats([r.e2e for r in lat], [r.bound for r in lat])
        errors = [float(row[5]) for row in self.loc_rows if row[5] != ""]
        converged = next((int(row[0]) for row in self.loc_rows if row[5] != "" and float(row[5]) < 2.0), None)
        for rec in self.pending_restore.values():
            self.reorch.append({**rec, "restored_at": None, "latency_us": None, "within_budget": False})
        summary = {
            "scenario": self.cfg.name,
            "seed": self.seed,
            "rounds": self.completed,
            "halted_rounds": self.halted_rounds,
            "bound_us": round(self.bound, 3),
            "comm_timeout_us": self.timeout,
            **stats,
            "collisions": len(self.net.collisions),
            "schedule_violations": len(self.net.violations),
            "quorum_failures": len(self.no_quorum),
            "incorrect_actuations": self.incorrect,
            "blocked_moves": self.blocked,
            "max_clock_error_us": round(self.max_clock_error, 3),
            "max_clock_skew_us": round(self.max_clock_skew, 3),
            "localization": {
                "errors_cells": [round(e, 4) for e in errors],
                "final_error_cells": round(errors[-1], 4) if errors else None,
                "first_round_below_2_cells": converged,
            },
            "reorchestrations": self.reorch,
            "sim_time_us": self.sim.now,
        }
        traces = {
            "robot.csv": self.rtrace.to_csv(),
            "network.csv": self.net.trace_csv(),
            "orchestration.csv": self.orch.to_csv(),
            "latency.csv": _csv(LATENCY_HEADER, [r.row() for r in lat]),
            "localization.csv": _csv(LOCALIZATION_HEADER, self.loc_rows),
            "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
        }
        if self.cfg.trace_events:
            traces["events.csv"] = self.sim.event_log_csv()
        return RunResult(summary, lat, traces)


def run(cfg: ScenarioConfig, seed: Optional[int] = None, out_dir=None) -> RunResult:
    result = ClosedLoop(cfg, seed).run()
    if out_dir is not None:
        result.write(out_dir)
    return result
