"""Scenario configuration: JSON loading, schema validation and cross-reference checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from ..mcl import McLConfig
from ..planner import PlannerConfig
from ..rmo import ContainerSpec, EdgeNode, Kind, instance_id
from ..robot import DEFAULT_TASKSET, TaskSpec
from ..ttwifi import RadioConfig, Slot, TdmaSchedule
from ..worldmodel import MotionNoise, OccupancyGrid, Pose

FAULT_KINDS = ("crash", "byzantine", "babble", "overrun", "clock_step")


class ConfigError(ValueError):
    pass


def _data_path(name: str) -> Path:
    return Path(str(resources.files("edgeloop") / "data" / name))


def load_schema() -> dict:
    return json.loads(_data_path("schema.json").read_text())


@dataclass(frozen=True)
class RobotParams:
    id: str = "robot"
    start: tuple[float, float, float] = (1.125, 7.375, 0.0)
    goal_cell: tuple[int, int] = (3, 34)
    sample_count: int = 366
    ms_per_sample: float = 0.5
    sensor_sigma: float = 0.03
    max_range: float = 8.0
    wheel_base: float = 0.33
    motion_noise: MotionNoise = field(default_factory=lambda: MotionNoise(0.01, 0.005, 0.002))
    actuation_grant_us: int = 0
    comm_timeout_us: Optional[int] = None
    halt_hold_us: int = 0
    tasks: tuple[TaskSpec, ...] = DEFAULT_TASKSET

    @property
    def start_pose(self) -> Pose:
        return Pose(*self.start)


@dataclass(frozen=True)
class TdmaParams:
    cycle_length: int = 10_000
    guard_time: Optional[int] = None
    max_clock_error: float = 20.0
    drift_ppm: float = 2.0
    order: Optional[tuple[str, ...]] = None
    slots: Optional[tuple[Slot, ...]] = None
    enforcement: bool = True
    replication: int = 1
    sync_k: int = 1
    sync_every_cycles: int = 10

    @property
    def guard(self) -> int:
        """Explicit guard, else twice the modeled clock error plus 10 us of jitter allowance."""
        if self.guard_time is not None:
            return self.guard_time
        return int(round(2 * self.max_clock_error + 10))


@dataclass(frozen=True)
class RejuvenationParams:
    period_us: int
    stagger_us: int
    restart_us: int
    first_at_us: int = 0


@dataclass(frozen=True)
class OrchestrationParams:
    monitor_period_us: int = 10_000
    container_start_us: int = 20_000
    reorchestration_budget_us: int = 50_000
    overrun_limit: int = 3
    rejuvenation: Optional[RejuvenationParams] = None


@dataclass(frozen=True)
class Fault:
    time_us: int
    kind: str
    target: str
    duration_us: Optional[int] = None
    interval_us: int = 5_000
    factor: float = 2.0
    offset_us: float = 0.0
    bytes: int = 1500

    def active(self, t: int) -> bool:
        return t >= self.time_us and (self.duration_us is None or t < self.time_us + self.duration_us)


@dataclass(frozen=True)
class ScenarioConfig:
    grid: OccupancyGrid
    edge_nodes: tuple[dict, ...]
    containers: tuple[ContainerSpec, ...]
    name: str = "scenario"
    map_path: str = ""
    seed: int = 1
    rounds: int = 30
    trace_events: bool = True
    robot: RobotParams = field(default_factory=RobotParams)
    radio: RadioConfig = field(default_factory=RadioConfig)
    tdma: TdmaParams = field(default_factory=TdmaParams)
    mcl_container: str = "mcl"
    contention_alpha: float = 0.15
    vote_overhead_us: int = 100
    mcl: McLConfig = field(default_factory=lambda: McLConfig(particle_count=2000))
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    orchestration: OrchestrationParams = field(default_factory=OrchestrationParams)
    faults: tuple[Fault, ...] = ()

    def nodes(self) -> list[EdgeNode]:
        """Fresh, mutable node objects (status is run state)."""
        return [EdgeNode(**n) for n in self.edge_nodes]

    @property
    def node_ids(self) -> list[str]:
        return [n["id"] for n in self.edge_nodes]

    @property
    def mcl_spec(self) -> ContainerSpec:
        return next(c for c in self.containers if c.name == self.mcl_container)

    def schedule(self) -> TdmaSchedule:
        t = self.tdma
        if t.slots:
            return TdmaSchedule(t.cycle_length, list(t.slots), t.guard)
        owners = list(t.order) if t.order else [self.robot.id] + self.node_ids
        return TdmaSchedule.uniform(owners, t.cycle_length, t.guard)

    def with_(self, **changes) -> "ScenarioConfig":
        out = replace(self, **changes)
        validate_references(out)
        return out


def _noise(d: Optional[dict], default: MotionNoise) -> MotionNoise:
    return replace(default, **d) if d else default


def from_dict(raw: dict, base_dir: Optional[Path] = None) -> ScenarioConfig:
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"schema error at {where}: {exc.message}") from None
    map_file = _resolve_map(raw["map"], base_dir)
    grid = OccupancyGrid.load(map_file)

    r = dict(raw.get("robot", {}))
    robot_defaults = RobotParams()
    if "motion_noise" in r:
        r["motion_noise"] = _noise(r["motion_noise"], robot_defaults.motion_noise)
    if "tasks" in r:
        r["tasks"] = tuple(TaskSpec(**t) for t in r["tasks"])
    for key in ("start", "goal_cell"):
        if key in r:
            r[key] = tuple(r[key])
    robot = replace(robot_defaults, **r)

    t = dict(raw.get("tdma", {}))
    if "slots" in t:
        t["slots"] = tuple(Slot(s["owner"], s["start"], s["length"]) for s in t["slots"])
    if "order" in t:
        t["order"] = tuple(t["order"])
    tdma = replace(TdmaParams(), **t)

    m = dict(raw.get("mcl", {}))
    mcl_defaults = McLConfig(particle_count=2000)
    if "motion_noise" in m:
        m["motion_noise"] = _noise(m["motion_noise"], mcl_defaults.motion_noise)
    mcl = replace(mcl_defaults, **m)

    o = dict(raw.get("orchestration", {}))
    if o.get("rejuvenation"):
        o["rejuvenation"] = RejuvenationParams(**o["rejuvenation"])
    orch = replace(OrchestrationParams(), **o)

    try:
        cfg = ScenarioConfig(
            grid=grid,
            edge_nodes=tuple({"id": n["id"], **{k: v for k, v in n.items() if k != "id"}} for n in raw["edge_nodes"]),
            containers=tuple(ContainerSpec(**c) for c in raw["containers"]),
            name=raw.get("name", Path(raw["map"]).stem),
            map_path=str(map_file),
            seed=raw.get("seed", 1),
            rounds=raw.get("rounds", 30),
            trace_events=raw.get("trace_events", True),
            robot=robot,
            radio=replace(RadioConfig(), **raw.get("radio", {})),
            tdma=tdma,
            mcl_container=raw.get("mcl_container", "mcl"),
            contention_alpha=raw.get("contention_alpha", 0.15),
            vote_overhead_us=raw.get("vote_overhead_us", 100),
            mcl=mcl,
            planner=replace(PlannerConfig(), **raw.get("planner", {})),
            orchestration=orch,
            faults=tuple(Fault(**f) for f in raw.get("faults", [])),
        )
        cfg.nodes()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    validate_references(cfg)
    return cfg


def _resolve_map(name: str, base_dir: Optional[Path]) -> Path:
    candidates = [Path(name)]
    if base_dir is not None:
        candidates.insert(0, base_dir / name)
    candidates.append(_data_path(Path(name).name))
    for c in candidates:
        if c.is_file():
            return c
    raise ConfigError(f"map file {name!r} not found")


def validate_references(cfg: ScenarioConfig) -> None:
    ids = cfg.node_ids
    if len(set(ids)) != len(ids):
        raise ConfigError("edge node ids must be unique")
    if cfg.robot.id in ids:
        raise ConfigError(f"robot id {cfg.robot.id!r} clashes with an edge node")
    names = [c.name for c in cfg.containers]
    if len(set(names)) != len(names):
        raise ConfigError("container names must be unique")
    if cfg.mcl_container not in names:
        raise ConfigError(f"mcl_container {cfg.mcl_container!r} is not a declared container")
    if cfg.mcl_spec.kind is not Kind.CRITICAL:
        raise ConfigError("the localization container must be critical")
    try:
        sched = cfg.schedule()
    except ValueError as exc:
        raise ConfigError(f"tdma: {exc}") from None
    members = set(ids) | {cfg.robot.id}
    for owner in sched.owners:
        if owner not in members:
            raise ConfigError(f"slot owner {owner!r} is not a node")
    for node in members:
        if not sched.slots_of(node):
            raise ConfigError(f"node {node!r} owns no TDMA slot")
    instances = set(cfg.mcl_spec.instances())
    for f in cfg.faults:
        if f.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {f.kind!r}")
        if f.kind in ("byzantine", "overrun"):
            if f.target not in instances:
                raise ConfigError(f"fault target {f.target!r} is not an instance like {instance_id(cfg.mcl_container, 0)!r}")
        elif f.kind == "crash":
            if f.target not in ids:
                raise ConfigError(f"crash target {f.target!r} is not an edge node")
        elif f.target not in members:
            raise ConfigError(f"fault target {f.target!r} is not a node")
    if not cfg.grid.is_free(*cfg.robot.goal_cell):
        raise ConfigError(f"goal cell {cfg.robot.goal_cell} is not free")
    p = cfg.robot.start_pose
    if not cfg.grid.is_free_point(p.x, p.y):
        raise ConfigError(f"start pose ({p.x}, {p.y}) is not in free space")


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return from_dict(raw, path.parent)


def default_scenario_path() -> Path:
    return _data_path("default.json")


def default_scenario() -> ScenarioConfig:
    return load_scenario(default_scenario_path())
