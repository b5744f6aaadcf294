"""Robot node: the onboard fixed-priority task set and the offloaded control-loop state machine."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .simkern import SimTime
from .worldmodel import MoveCommand, Pose


@dataclass(frozen=True)
class TaskSpec:
    name: str
    period: int
    wcet: int
    priority: int

    def __post_init__(self):
        if self.wcet <= 0 or self.period <= 0:
            raise ValueError(f"task {self.name!r}: period and wcet must be positive")
        if self.wcet > self.period:
            raise ValueError(f"task {self.name!r}: wcet exceeds period")


# Periods and relative priorities of the onboard task set; the WCETs are assumed defaults.
DEFAULT_TASKSET = (
    TaskSpec("lidar_message_parser", 1_000, 100, 0),
    TaskSpec("robot_message_parser", 2_000, 200, 0),
    TaskSpec("robot_velocity_update", 50_000, 1_000, 1),
    TaskSpec("robot_odometry_update", 250_000, 2_000, 2),
    TaskSpec("robot_system_manager", 60_000_000, 5_000, 2),
)


def is_harmonic(tasks) -> bool:
    periods = sorted(t.period for t in tasks)
    return all(b % a == 0 for a, b in zip(periods, periods[1:]))


def response_time(tasks, index: int) -> Optional[float]:
    """Worst-case response time of ``tasks[index]``, or ``None`` if it exceeds the period.

    Every other task with equal or higher priority (lower number) interferes.
    """
    me = tasks[index]
    hp = [t for j, t in enumerate(tasks) if j != index and t.priority <= me.priority]
    r = me.wcet + sum(t.wcet for t in hp)
    while r <= me.period:
        nxt = me.wcet + sum(math.ceil(r / t.period) * t.wcet for t in hp)
        if nxt == r:
            return r
        r = nxt
    return None


def analyze_taskset(tasks) -> list[tuple[str, Optional[float], int]]:
    return [(t.name, response_time(tasks, i), t.period) for i, t in enumerate(tasks)]


class Mode(str, Enum):
    SENSING = "sensing"
    TRANSMITTING = "transmitting"
    AWAITING = "awaiting"
    ACTUATING = "actuating"
    HALTED = "halted"


class Stimulus(str, Enum):
    BEGIN = "begin"
    SENSE_DONE = "sense_done"
    UPLINK_SENT = "uplink_sent"
    COMMAND = "command"
    TIMEOUT = "timeout"
    ACTUATION_DONE = "actuation_done"


@dataclass(frozen=True)
class RobotState:
    mode: Mode
    last_command_at: Optional[SimTime]
    comm_timeout: int
    true_pose: Pose
    round: int = 0
    round_started_at: SimTime = 0
    halted_since: Optional[SimTime] = None


def initial_state(pose: Pose, comm_timeout: int) -> RobotState:
    return RobotState(Mode.HALTED, None, comm_timeout, pose)


@dataclass(frozen=True)
class Action:
    """Side effect requested by the state machine; the scenario runner carries it out."""

    name: str
    round: int
    at: SimTime = 0
    command: Optional[MoveCommand] = None
    reason: str = ""


def control_loop_step(state: RobotState, stimulus: Stimulus, now: SimTime, *, round_id: Optional[int] = None,
                      command: Optional[MoveCommand] = None) -> tuple[RobotState, list[Action]]:
    """One transition of sense -> transmit -> await -> actuate, with halt on timeout.

    A command is only accepted while awaiting, for the current round and before
    the round's deadline. Anything else is discarded, so a halted robot never
    moves until a fresh round has produced a valid command.
    """
    stimulus = Stimulus(stimulus)
    if stimulus in (Stimulus.BEGIN, Stimulus.ACTUATION_DONE):
        if stimulus is Stimulus.ACTUATION_DONE and state.mode is not Mode.ACTUATING:
            return state, [Action("discard", state.round, now, reason="not actuating")]
        if stimulus is Stimulus.BEGIN and state.mode is not Mode.HALTED:
            return state, [Action("discard", state.round, now, reason=f"begin while {state.mode.value}")]
        r = state.round + 1
        new = replace(state, mode=Mode.SENSING, round=r, round_started_at=now)
        return new, [Action("sense", r, now), Action("arm_timeout", r, now + state.comm_timeout)]
    if stimulus is Stimulus.SENSE_DONE:
        if state.mode is not Mode.SENSING:
            return state, [Action("discard", state.round, now, reason="not sensing")]
        return replace(state, mode=Mode.TRANSMITTING), [Action("uplink", state.round, now)]
    if stimulus is Stimulus.UPLINK_SENT:
        if state.mode is not Mode.TRANSMITTING:
            return state, [Action("discard", state.round, now, reason="not transmitting")]
        return replace(state, mode=Mode.AWAITING), []
    if stimulus is Stimulus.COMMAND:
        deadline = state.round_started_at + state.comm_timeout
        if state.mode is not Mode.AWAITING or round_id != state.round or now > deadline or command is None:
            return state, [Action("discard", state.round, now, command, reason="stale or unexpected command")]
        new = replace(state, mode=Mode.ACTUATING, last_command_at=now, halted_since=None)
        return new, [Action("actuate", state.round, now, command)]
    if stimulus is Stimulus.TIMEOUT:
        if round_id != state.round or state.mode not in (Mode.SENSING, Mode.TRANSMITTING, Mode.AWAITING):
            return state, []
        new = replace(state, mode=Mode.HALTED, halted_since=now)
        return new, [Action("halt", state.round, now, reason="comm timeout")]
    raise ValueError(f"unknown stimulus {stimulus!r}")


ROBOT_HEADER = ["true_time_us", "mode", "x", "y", "theta", "event"]


@dataclass
class RobotTrace:
    rows: list[tuple] = field(default_factory=list)

    def add(self, t: SimTime, state: RobotState, event: str) -> None:
        p = state.true_pose
        self.rows.append((int(t), state.mode.value, f"{p.x:.6f}", f"{p.y:.6f}", f"{p.theta:.6f}", event))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROBOT_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()
