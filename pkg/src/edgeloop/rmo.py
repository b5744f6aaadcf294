"""Resource management and orchestration: contention model, LRM placement, re-orchestration,
replica voting, staggered rejuvenation and per-node monitors."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .worldmodel import MoveCommand

log = logging.getLogger(__name__)


class Kind(str, Enum):
    CRITICAL = "critical"
    BEST_EFFORT = "best-effort"


class InfeasiblePlacement(RuntimeError):
    def __init__(self, instance: str, reason: str = "no node with capacity"):
        super().__init__(f"cannot place {instance}: {reason}")
        self.instance = instance


class RejuvenationError(ValueError):
    pass


@dataclass(frozen=True)
class ContainerSpec:
    name: str
    kind: Kind = Kind.CRITICAL
    cores_demand: int = 1
    bw_demand: int = 1
    base_exec_time: float = 100_000.0
    parallel_fraction: float = 0.8
    period: int = 250_000
    replicas: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.cores_demand <= 0 or self.bw_demand < 0 or self.base_exec_time <= 0 or self.replicas < 1:
            raise ValueError(f"container {self.name!r}: demands must be positive")
        if not 0.0 <= self.parallel_fraction <= 1.0:
            raise ValueError(f"container {self.name!r}: parallel_fraction outside [0, 1]")

    def instances(self) -> list[str]:
        return [instance_id(self.name, i) for i in range(self.replicas)]


def instance_id(name: str, replica: int) -> str:
    return f"{name}#{replica}"


def spec_of(instance: str) -> str:
    return instance.rsplit("#", 1)[0]


@dataclass
class EdgeNode:
    id: str
    total_cores: int = 8
    critical_cores: int = 4
    memory_bw_units: int = 10
    status: str = "up"

    def __post_init__(self):
        if not 0 < self.critical_cores < self.total_cores:
            raise ValueError(f"node {self.id!r}: need 0 < critical_cores < total_cores")

    @property
    def up(self) -> bool:
        return self.status == "up"

    @property
    def best_effort_cores(self) -> int:
        return self.total_cores - self.critical_cores


@dataclass
class Placement:
    mapping: dict[str, str]
    epoch: int = 0
    degraded: set[str] = field(default_factory=set)
    unplaced: list[str] = field(default_factory=list)

    def on_node(self, node: str) -> list[str]:
        return [i for i, n in self.mapping.items() if n == node]

    def replicas_of(self, spec: str) -> dict[str, str]:
        return {i: n for i, n in self.mapping.items() if spec_of(i) == spec}


def exec_time(spec: ContainerSpec, cores: int, co_runners: int, alpha: float) -> float:
    """Amdahl speed-up on ``cores`` times linear inflation per co-running container."""
    if cores < 1 or alpha < 0 or co_runners < 0:
        raise ValueError("need cores >= 1, co_runners >= 0, alpha >= 0")
    p = spec.parallel_fraction
    return spec.base_exec_time * (1.0 - p + p / cores) * (1.0 + alpha * co_runners)


class _Capacity:
    def __init__(self, node: EdgeNode):
        self.crit = node.critical_cores
        self.be = node.best_effort_cores
        self.bw = node.memory_bw_units
        self.specs: set[str] = set()

    def fits(self, spec: ContainerSpec) -> bool:
        if spec.name in self.specs or spec.bw_demand > self.bw:
            return False
        room = self.crit if spec.kind is Kind.CRITICAL else self.be
        return spec.cores_demand <= room

    def take(self, spec: ContainerSpec) -> None:
        if spec.kind is Kind.CRITICAL:
            self.crit -= spec.cores_demand
        else:
            self.be -= spec.cores_demand
        self.bw -= spec.bw_demand
        self.specs.add(spec.name)


def _pack(instances: list[str], specs: dict[str, ContainerSpec], nodes: list[EdgeNode],
          fixed: dict[str, str], exclude: Optional[dict[str, set[str]]] = None):
    """First-fit decreasing over residual capacity. Returns (mapping, failed instances)."""
    caps = {n.id: _Capacity(n) for n in nodes if n.up}
    for inst, nid in fixed.items():
        if nid in caps:
            caps[nid].take(specs[spec_of(inst)])
    exclude = exclude or {}

    def order(kind):
        chosen = [i for i in instances if specs[spec_of(i)].kind is kind]
        return sorted(chosen, key=lambda i: -specs[spec_of(i)].cores_demand)

    mapping: dict[str, str] = {}
    failed: list[str] = []
    for inst in order(Kind.CRITICAL) + order(Kind.BEST_EFFORT):
        spec = specs[spec_of(inst)]
        for node in nodes:
            cap = caps.get(node.id)
            if cap is None or node.id in exclude.get(inst, ()):
                continue
            if cap.fits(spec):
                cap.take(spec)
                mapping[inst] = node.id
                break
        else:
            failed.append(inst)
    return mapping, failed


def lrm_place(specs: list[ContainerSpec], nodes: list[EdgeNode]) -> Placement:
    """Initial placement; raises :class:`InfeasiblePlacement` for the first unplaceable critical instance."""
    by_name = {s.name: s for s in specs}
    instances = [i for s in specs for i in s.instances()]
    mapping, failed = _pack(instances, by_name, nodes, {})
    for inst in failed:
        if by_name[spec_of(inst)].kind is Kind.CRITICAL:
            raise InfeasiblePlacement(inst)
    ordered = {i: mapping[i] for i in instances if i in mapping}
    return Placement(ordered, 0, set(), [i for i in failed])


def _replace(placement: Placement, moving: list[str], nodes: list[EdgeNode], specs: list[ContainerSpec],
             exclude: Optional[dict[str, set[str]]] = None) -> Placement:
    by_name = {s.name: s for s in specs}
    fixed = {i: n for i, n in placement.mapping.items() if i not in moving}
    mapping, failed = _pack(moving, by_name, nodes, fixed, exclude)
    new_map = dict(fixed)
    new_map.update(mapping)
    degraded = set(placement.degraded)
    unplaced = [i for i in placement.unplaced if i not in moving]
    for inst in failed:
        if by_name[spec_of(inst)].kind is Kind.CRITICAL:
            degraded.add(spec_of(inst))
        unplaced.append(inst)
    for name in list(degraded):
        if all(i in new_map for i in by_name[name].instances()):
            degraded.discard(name)
    return Placement(new_map, placement.epoch + 1, degraded, unplaced)


def reorchestrate(placement: Placement, crashed: str, nodes: list[EdgeNode],
                  specs: list[ContainerSpec]) -> Placement:
    """Move every instance of a crashed node onto survivors; unaffected instances stay put."""
    down = next((n for n in nodes if n.id == crashed), None)
    if down is None or down.up:
        raise ValueError(f"node {crashed!r} must be marked down before re-orchestration")
    moving = placement.on_node(crashed) + [i for i in placement.unplaced]
    return _replace(placement, moving, nodes, specs)


def migrate(placement: Placement, instance: str, nodes: list[EdgeNode], specs: list[ContainerSpec]) -> Placement:
    """Move one instance off its current node (e.g. after repeated budget overruns)."""
    current = placement.mapping[instance]
    out = _replace(placement, [instance], nodes, specs, exclude={instance: {current}})
    if instance not in out.mapping:
        out.mapping[instance] = current
        out.unplaced.remove(instance)
    return out


def worst_case_co_runners(nodes: list[EdgeNode], specs: list[ContainerSpec]) -> int:
    """Largest number of other containers any node could be made to host under admission control."""
    crit = [s for s in specs if s.kind is Kind.CRITICAL]
    be = [s for s in specs if s.kind is Kind.BEST_EFFORT]
    worst = 0
    for node in nodes:
        slots = 0
        if crit:
            slots += min(node.critical_cores // min(s.cores_demand for s in crit), len(crit))
        if be:
            slots += min(node.best_effort_cores // min(s.cores_demand for s in be), len(be))
        worst = max(worst, slots - 1)
    return worst


def quantize(cmd: MoveCommand) -> tuple:
    q = lambda x: int(math.floor(x * 1000.0 + 0.5))
    return (q(cmd.v), q(cmd.omega), int(cmd.duration_ms), cmd.sequence)


def vote(outputs: list[tuple[str, MoveCommand]], expected: Optional[int] = None) -> Optional[MoveCommand]:
    """Exact-match majority over quantized commands; ``None`` when no value has a strict majority."""
    if expected is None:
        expected = len(outputs)
    if expected < 1:
        raise ValueError("at least one replica is expected")
    counts = Counter(quantize(c) for _, c in outputs)
    for _, cmd in outputs:
        if counts[quantize(cmd)] * 2 > expected:
            return cmd
    return None


@dataclass(frozen=True)
class RejuvenationEvent:
    time: int
    instance: str
    phase: str


def rejuvenate(instances: list[str], schedule_period: int, stagger: int, restart_duration: int,
               horizon: int, first_at: int = 0) -> list[RejuvenationEvent]:
    """Staggered periodic restarts that never drop live replicas below a strict majority."""
    n = len(instances)
    if n <= 1:
        log.warning("rejuvenation disabled: %d replica(s) cannot keep a quorum during restart", n)
        return []
    if not stagger * (n - 1) < schedule_period:
        raise RejuvenationError("stagger * (replicas - 1) must be shorter than the period")
    quorum = (n + 2) // 2
    down = max_concurrent_down(n, schedule_period, stagger, restart_duration)
    if n - down < quorum:
        raise RejuvenationError(f"{down} replicas down at once leaves fewer than {quorum} live")
    events = []
    k = 0
    while True:
        base = first_at + k * schedule_period
        if base >= horizon:
            break
        for i, inst in enumerate(instances):
            t = base + i * stagger
            if t < horizon:
                events.append(RejuvenationEvent(t, inst, "start"))
                events.append(RejuvenationEvent(t + restart_duration, inst, "end"))
        k += 1
    events.sort(key=lambda e: (e.time, e.phase != "end", e.instance))
    return events


def max_concurrent_down(n: int, period: int, stagger: int, restart: int) -> int:
    """Peak number of simultaneously restarting replicas over one period (with wrap-around)."""
    points = []
    for i in range(n):
        for shift in (-period, 0, period):
            s = i * stagger + shift
            points.append((s, 1))
            points.append((s + restart, -1))
    points.sort(key=lambda p: (p[0], p[1]))
    cur = peak = 0
    for _, d in points:
        cur += d
        peak = max(peak, cur)
    return peak


@dataclass
class ContainerReport:
    last_exec_time: Optional[float]
    budget: float
    over_budget: bool
    deadline_misses: int
    consecutive_overruns: int


@dataclass
class MonitorReport:
    node: str
    up: bool
    free_critical_cores: int = 0
    free_bw_units: int = 0
    free_best_effort_cores: int = 0
    containers: dict[str, ContainerReport] = field(default_factory=dict)


class LocalResourceManager:
    """Per-node monitor state: execution times against budgets and overrun streaks."""

    def __init__(self, node: EdgeNode, specs: dict[str, ContainerSpec], overrun_limit: int = 3):
        self.node = node
        self.specs = specs
        self.overrun_limit = overrun_limit
        self.hosted: list[str] = []
        self.last: dict[str, float] = {}
        self.budget: dict[str, float] = {}
        self.misses: Counter = Counter()
        self.streak: Counter = Counter()

    def host(self, instances: Iterable[str]) -> None:
        self.hosted = list(instances)
        for i in list(self.streak):
            if i not in self.hosted:
                del self.streak[i]

    def record(self, instance: str, elapsed: float, budget: float) -> bool:
        """Log one execution; True once the instance overran its budget ``overrun_limit`` times in a row."""
        self.last[instance] = elapsed
        self.budget[instance] = budget
        if elapsed > budget:
            self.misses[instance] += 1
            self.streak[instance] += 1
        else:
            self.streak[instance] = 0
        return self.streak[instance] >= self.overrun_limit

    def snapshot(self) -> MonitorReport:
        return monitor_snapshot(self)


def monitor_snapshot(lrm: LocalResourceManager) -> MonitorReport:
    node = lrm.node
    if not node.up:
        return MonitorReport(node.id, False)
    cap = _Capacity(node)
    for inst in lrm.hosted:
        cap.take(lrm.specs[spec_of(inst)])
    reports = {}
    for inst in lrm.hosted:
        last = lrm.last.get(inst)
        budget = lrm.budget.get(inst, math.inf)
        reports[inst] = ContainerReport(last, budget, last is not None and last > budget,
                                        lrm.misses[inst], lrm.streak[inst])
    return MonitorReport(node.id, True, cap.crit, cap.bw, cap.be, reports)


ORCH_HEADER = ["true_time_us", "event", "subject", "detail"]


class OrchestrationTrace:
    def __init__(self):
        self.rows: list[tuple[int, str, str, str]] = []

    def add(self, t: int, event: str, subject: str, detail: str = "") -> None:
        self.rows.append((int(t), event, subject, detail))

    def count(self, event: str) -> int:
        return sum(1 for r in self.rows if r[1] == event)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ORCH_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()
