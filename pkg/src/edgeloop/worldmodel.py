"""Ground-truth environment: occupancy grid, robot kinematics and synthetic sensors.

Coordinates: cell ``(row, col)`` covers ``x in [col*res, (col+1)*res)`` and
``y in [row*res, (row+1)*res)``. The first map line is row 0. Anything outside
the grid counts as occupied.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _raycast

B_LIDAR_SAMPLE = (2 * 64) // 8
B_ODOMETRY = (4 * 64) // 8
MIN_SAMPLES = 354
MAX_SAMPLES = 366


class MapFormatError(ValueError):
    pass


class RayCastError(ValueError):
    pass


def normalize_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))


@dataclass(frozen=True)
class MoveCommand:
    """Motion primitive: linear speed (m/s), turn rate (rad/s), duration (ms)."""

    v: float
    omega: float
    duration_ms: int
    sequence: int = 0

    WIRE = struct.Struct("<3dq")

    @property
    def is_halt(self) -> bool:
        return self.v == 0.0 and self.omega == 0.0

    def to_bytes(self) -> bytes:
        return self.WIRE.pack(self.v, self.omega, float(self.duration_ms), self.sequence)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MoveCommand":
        v, omega, dur, seq = cls.WIRE.unpack(raw)
        return cls(v, omega, int(round(dur)), seq)


def halt_command(sequence: int = 0) -> MoveCommand:
    return MoveCommand(0.0, 0.0, 0, sequence)


@dataclass(frozen=True)
class MotionNoise:
    sigma_v: float = 0.02
    sigma_omega: float = 0.01
    sigma_theta: float = 0.005


ZERO_NOISE = MotionNoise(0.0, 0.0, 0.0)


class OccupancyGrid:
    def __init__(self, cells: np.ndarray, resolution: float):
        cells = np.asarray(cells, dtype=np.bool_)
        if cells.ndim != 2:
            raise MapFormatError("cells must be a 2-D array")
        if not resolution > 0:
            raise MapFormatError("resolution must be positive")
        self.cells = np.ascontiguousarray(cells)
        self.cells.setflags(write=False)
        self.height, self.width = cells.shape
        self.resolution = float(resolution)

    @classmethod
    def empty(cls, width: int, height: int, resolution: float = 1.0) -> "OccupancyGrid":
        return cls(np.zeros((height, width), dtype=np.bool_), resolution)

    @classmethod
    def parse(cls, text: str) -> "OccupancyGrid":
        lines = [ln.rstrip() for ln in text.splitlines()]
        while lines and not lines[-1]:
            lines.pop()
        if not lines:
            raise MapFormatError("empty map file")
        header = lines[0].split()
        if len(header) != 3:
            raise MapFormatError("line 1: header must be 'W H RESOLUTION_M'")
        try:
            w, h, res = int(header[0]), int(header[1]), float(header[2])
        except ValueError as exc:
            raise MapFormatError(f"line 1: {exc}") from None
        rows = lines[1:]
        if len(rows) != h:
            raise MapFormatError(f"expected {h} rows, found {len(rows)}")
        cells = np.zeros((h, w), dtype=np.bool_)
        for r, row in enumerate(rows):
            if len(row) != w:
                raise MapFormatError(f"line {r + 2}: expected {w} cells, found {len(row)}")
            for c, ch in enumerate(row):
                if ch == "#":
                    cells[r, c] = True
                elif ch != ".":
                    raise MapFormatError(f"line {r + 2}: invalid cell character {ch!r}")
        return cls(cells, res)

    @classmethod
    def load(cls, path) -> "OccupancyGrid":
        return cls.parse(Path(path).read_text())

    def to_text(self) -> str:
        out = [f"{self.width} {self.height} {self.resolution:g}"]
        for row in self.cells:
            out.append("".join("#" if v else "." for v in row))
        return "\n".join(out) + "\n"

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def is_free(self, row: int, col: int) -> bool:
        return self.in_bounds(row, col) and not self.cells[row, col]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution))

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.resolution, (row + 0.5) * self.resolution

    def is_free_point(self, x: float, y: float) -> bool:
        return self.is_free(*self.cell_of(x, y))

    def free_cells(self) -> np.ndarray:
        """``(n, 2)`` array of free ``(row, col)`` pairs in row-major order."""
        return np.argwhere(~self.cells)

    def __eq__(self, other):
        return (isinstance(other, OccupancyGrid) and other.resolution == self.resolution
                and np.array_equal(other.cells, self.cells))


@dataclass(frozen=True, eq=False)
class LidarScan:
    """One full rotation; angles are relative to the robot heading."""

    angles: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        n = len(self.angles)
        if len(self.distances) != n:
            raise ValueError("angles and distances differ in length")
        if not MIN_SAMPLES <= n <= MAX_SAMPLES:
            raise ValueError(f"sample count {n} outside [{MIN_SAMPLES}, {MAX_SAMPLES}]")
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("scan angles must be strictly increasing")

    @property
    def sample_count(self) -> int:
        return len(self.angles)

    def to_bytes(self) -> bytes:
        pairs = np.empty((self.sample_count, 2), dtype="<f8")
        pairs[:, 0] = self.angles
        pairs[:, 1] = self.distances
        return pairs.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "LidarScan":
        pairs = np.frombuffer(raw, dtype="<f8").reshape(-1, 2)
        return cls(pairs[:, 0].copy(), pairs[:, 1].copy())


@dataclass(frozen=True)
class OdometryReading:
    """Wheel travel since the previous reading (m), robot-local timestamp (us), status flags."""

    left: float
    right: float
    timestamp: float
    status: float = 0.0

    WIRE = struct.Struct("<4d")

    def to_bytes(self) -> bytes:
        return self.WIRE.pack(self.left, self.right, self.timestamp, self.status)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "OdometryReading":
        return cls(*cls.WIRE.unpack(raw))

    @classmethod
    def from_command(cls, cmd: MoveCommand, wheel_base: float, timestamp: float) -> "OdometryReading":
        dt = cmd.duration_ms / 1000.0
        dist = cmd.v * dt
        turn = cmd.omega * dt
        return cls(dist - turn * wheel_base / 2.0, dist + turn * wheel_base / 2.0, timestamp)

    def to_command(self, wheel_base: float, sequence: int = 0) -> MoveCommand:
        """Equivalent unicycle command spread over one second."""
        return MoveCommand((self.left + self.right) / 2.0, (self.right - self.left) / wheel_base, 1000, sequence)


def encode_sensor_message(scan: LidarScan, odom: OdometryReading) -> bytes:
    return scan.to_bytes() + odom.to_bytes()


def decode_sensor_message(raw: bytes) -> tuple[LidarScan, OdometryReading]:
    if (len(raw) - B_ODOMETRY) % B_LIDAR_SAMPLE:
        raise ValueError(f"sensor message of {len(raw)} bytes is not 16*n + 32")
    split = len(raw) - B_ODOMETRY
    return LidarScan.from_bytes(raw[:split]), OdometryReading.from_bytes(raw[split:])


def ray_cast(grid: OccupancyGrid, origin: Pose, angle: float, max_range: float) -> float:
    """Distance from ``origin`` along world-frame ``angle`` to the first occupied cell."""
    d = _raycast.cast_one(grid.cells, grid.resolution, origin.x, origin.y, angle, max_range)
    if d < 0:
        raise RayCastError(f"origin ({origin.x}, {origin.y}) is out of bounds or inside an obstacle")
    return d


def scan_angles(sample_count: int) -> np.ndarray:
    return np.arange(sample_count) * (2.0 * math.pi / sample_count)


def generate_scan(grid: OccupancyGrid, true_pose: Pose, sample_count: int, sensor_sigma: float,
                  rng: np.random.Generator, max_range: float = 8.0) -> LidarScan:
    if not MIN_SAMPLES <= sample_count <= MAX_SAMPLES:
        raise ValueError(f"sample count {sample_count} outside [{MIN_SAMPLES}, {MAX_SAMPLES}]")
    angles = scan_angles(sample_count)
    dists = np.empty(sample_count)
    _raycast.cast_fan(grid.cells, grid.resolution, true_pose.x, true_pose.y, true_pose.theta,
                      angles, max_range, dists)
    if dists[0] < 0:
        raise RayCastError("scan origin is out of bounds or inside an obstacle")
    if sensor_sigma > 0:
        dists = np.clip(dists + rng.normal(0.0, sensor_sigma, sample_count), 0.0, max_range)
    return LidarScan(angles, dists)


def sensor_payload_bytes(sample_count: int) -> int:
    if sample_count < 0:
        raise ValueError("sample count must be non-negative")
    return sample_count * B_LIDAR_SAMPLE + B_ODOMETRY


def measurement_duration(sample_count: int, ms_per_sample: float) -> int:
    """Duration of one Lidar rotation in microseconds (rounded half-up)."""
    if sample_count < 0 or ms_per_sample < 0:
        raise ValueError("arguments must be non-negative")
    return int(math.floor(sample_count * ms_per_sample * 1000.0 + 0.5))


def apply_motion(pose: Pose, command: MoveCommand, noise: MotionNoise = ZERO_NOISE,
                 rng: np.random.Generator | None = None) -> Pose:
    """Unicycle update: rotate by omega*dt, then translate v*dt along the new heading."""
    dt = command.duration_ms / 1000.0
    v, omega, dtheta = command.v, command.omega, 0.0
    if rng is not None and (noise.sigma_v or noise.sigma_omega or noise.sigma_theta):
        nv, nw, nt = rng.normal(0.0, 1.0, 3)
        v += nv * noise.sigma_v
        omega += nw * noise.sigma_omega
        dtheta = nt * noise.sigma_theta
    heading = pose.theta + omega * dt
    return Pose(pose.x + v * dt * math.cos(heading), pose.y + v * dt * math.sin(heading), heading + dtheta)
