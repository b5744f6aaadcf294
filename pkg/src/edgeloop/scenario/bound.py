"""Analytic end-to-end latency bound for one control round."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from ..rmo import exec_time, worst_case_co_runners
from ..ttwifi import burst_tx_bound
from ..worldmodel import MoveCommand, measurement_duration, sensor_payload_bytes
from .config import ScenarioConfig

COMMAND_BYTES = MoveCommand.WIRE.size
# target burst time for one full scan; the radio's per-frame overhead is calibrated against it
REFERENCE_BURST_US = 122.16
REFERENCE_SENSOR_PAYLOAD = 5888


@dataclass(frozen=True)
class E2EBudget:
    sense: float
    uplink_wait: float
    uplink_tx: float
    compute: float
    downlink_wait: float
    downlink_tx: float
    actuation_grant: float

    @property
    def total(self) -> float:
        return (self.sense + self.uplink_wait + self.uplink_tx + self.compute
                + self.downlink_wait + self.downlink_tx + self.actuation_grant)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        return out


def compute_budget(cfg: ScenarioConfig) -> float:
    """Localization execution time under the worst co-runner count admission allows, plus voting."""
    spec = cfg.mcl_spec
    co = worst_case_co_runners(cfg.nodes(), list(cfg.containers))
    return exec_time(spec, spec.cores_demand, co, cfg.contention_alpha) + cfg.vote_overhead_us


def e2e_bound(cfg: ScenarioConfig) -> E2EBudget:
    robot = cfg.robot
    wait = cfg.tdma.cycle_length + cfg.tdma.guard
    rep = cfg.tdma.replication
    return E2EBudget(
        sense=float(measurement_duration(robot.sample_count, robot.ms_per_sample)),
        uplink_wait=float(wait),
        uplink_tx=burst_tx_bound(sensor_payload_bytes(robot.sample_count), cfg.radio, rep),
        compute=compute_budget(cfg),
        downlink_wait=float(wait),
        downlink_tx=burst_tx_bound(COMMAND_BYTES, cfg.radio, rep),
        actuation_grant=float(robot.actuation_grant_us),
    )


def comm_timeout(cfg: ScenarioConfig) -> int:
    if cfg.robot.comm_timeout_us is not None:
        return cfg.robot.comm_timeout_us
    return int(2 * e2e_bound(cfg).total)
