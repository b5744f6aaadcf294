"""Monte-Carlo localization: motion update, beam sensor model, systematic resampling.

The data-parallel phases (motion and weighting) take all random draws for the
whole population up front, indexed by particle position, and the weighting
kernel is deterministic per particle. Splitting work across a thread pool
therefore cannot change any result.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _raycast
from .worldmodel import (
    LidarScan,
    MotionNoise,
    MoveCommand,
    OccupancyGrid,
    Pose,
)


class LocalizationError(ValueError):
    pass


@dataclass(frozen=True)
class Particle:
    pose: Pose
    weight: float

    def __post_init__(self):
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise ValueError("particle weight must be finite and non-negative")


@dataclass(frozen=True)
class McLConfig:
    particle_count: int = 10000
    sensor_sigma: float = 0.2
    motion_noise: MotionNoise = field(default_factory=lambda: MotionNoise(0.02, 0.01, 0.005))
    injection_threshold: float = 1e-8
    injection_fraction: float = 0.05
    beam_decimation: int = 6
    max_range: float = 8.0
    estimator: str = "mean"
    workers: int = 1

    def __post_init__(self):
        if self.particle_count < 1:
            raise ValueError("particle_count must be >= 1")
        if not 0.0 <= self.injection_threshold <= 1.0 or not 0.0 <= self.injection_fraction <= 1.0:
            raise ValueError("injection threshold and fraction must lie in [0, 1]")
        if self.beam_decimation < 1:
            raise ValueError("beam_decimation must be >= 1")
        if self.sensor_sigma <= 0:
            raise ValueError("sensor_sigma must be positive")
        if self.estimator not in ("mean", "max"):
            raise ValueError("estimator must be 'mean' or 'max'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


class ParticleSet:
    """Structure-of-arrays particle population."""

    def __init__(self, x, y, theta, weight, generation: int = 0):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.theta = np.asarray(theta, dtype=np.float64)
        self.weight = np.asarray(weight, dtype=np.float64)
        n = len(self.x)
        if not (len(self.y) == len(self.theta) == len(self.weight) == n):
            raise ValueError("particle arrays differ in length")
        self.generation = generation

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> Particle:
        return Particle(Pose(self.x[i], self.y[i], self.theta[i]), float(self.weight[i]))

    @classmethod
    def from_particles(cls, particles, generation: int = 0) -> "ParticleSet":
        ps = list(particles)
        return cls([p.pose.x for p in ps], [p.pose.y for p in ps], [p.pose.theta for p in ps],
                   [p.weight for p in ps], generation)

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.x.copy(), self.y.copy(), self.theta.copy(), self.weight.copy(), self.generation)

    def take(self, idx: np.ndarray) -> "ParticleSet":
        return ParticleSet(self.x[idx], self.y[idx], self.theta[idx], self.weight[idx], self.generation)

    def digest(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        for arr in (self.x, self.y, self.theta, self.weight):
            h.update(arr.tobytes())
        h.update(self.generation.to_bytes(8, "little", signed=True))
        return h.digest()

    def same_as(self, other: "ParticleSet") -> bool:
        return (self.generation == other.generation and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.theta, other.theta)
                and np.array_equal(self.weight, other.weight))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "theta", "weight"])
        for row in zip(self.x, self.y, self.theta, self.weight):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _uniform_poses(grid: OccupancyGrid, n: int, rng: np.random.Generator):
    free = grid.free_cells()
    if len(free) == 0:
        raise LocalizationError("grid has no free cell")
    pick = free[rng.integers(0, len(free), n)]
    u = rng.random((n, 3))
    res = grid.resolution
    x = (pick[:, 1] + u[:, 0]) * res
    y = (pick[:, 0] + u[:, 1]) * res
    theta = np.pi - u[:, 2] * (2.0 * np.pi)
    return x, y, theta


def init_particles(grid: OccupancyGrid, config: McLConfig, rng: np.random.Generator) -> ParticleSet:
    """Uniform over free cells, uniform heading in (-pi, pi], equal weights."""
    n = config.particle_count
    x, y, theta = _uniform_poses(grid, n, rng)
    return ParticleSet(x, y, theta, np.full(n, 1.0 / n), 0)


def _wrap(a: np.ndarray) -> np.ndarray:
    out = np.remainder(a + np.pi, 2.0 * np.pi) - np.pi
    out[out <= -np.pi] += 2.0 * np.pi
    return out


def motion_update(pset: ParticleSet, command: MoveCommand, config: McLConfig,
                  rng: np.random.Generator) -> ParticleSet:
    """Advance every particle by the unicycle model with per-particle noise.

    Same update as :func:`worldmodel.apply_motion`, vectorized. Noise draws are
    row ``i`` of one ``(N, 3)`` standard-normal block.
    """
    n = len(pset)
    dt = command.duration_ms / 1000.0
    noise = config.motion_noise
    z = rng.standard_normal((n, 3))
    v = command.v + z[:, 0] * noise.sigma_v
    omega = command.omega + z[:, 1] * noise.sigma_omega
    heading = pset.theta + omega * dt
    x = pset.x + v * dt * np.cos(heading)
    y = pset.y + v * dt * np.sin(heading)
    theta = _wrap(heading + z[:, 2] * noise.sigma_theta)
    return ParticleSet(x, y, theta, pset.weight.copy(), pset.generation)


def _beams(scan: LidarScan, config: McLConfig) -> tuple[np.ndarray, np.ndarray]:
    k = config.beam_decimation
    return (np.ascontiguousarray(scan.angles[::k], dtype=np.float64),
            np.ascontiguousarray(scan.distances[::k], dtype=np.float64))


def log_weights(pset: ParticleSet, scan: LidarScan, grid: OccupancyGrid, config: McLConfig,
                workers: int | None = None) -> np.ndarray:
    """Per-particle log-likelihood; ``-inf`` for particles outside free space."""
    rel, meas = _beams(scan, config)
    n = len(pset)
    out = np.empty(n)
    workers = config.workers if workers is None else workers
    args = (grid.cells, grid.resolution, pset.x, pset.y, pset.theta, rel, meas,
            config.max_range, config.sensor_sigma, out)
    if workers <= 1 or n < 2 * workers:
        _raycast.beam_loglik(*args, 0, n)
        return out
    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_raycast.beam_loglik, *args, int(lo), int(hi))
                   for lo, hi in zip(bounds[:-1], bounds[1:])]
        for f in futures:
            f.result()
    return out


def sensor_weight(particle: Particle, scan: LidarScan, grid: OccupancyGrid, config: McLConfig) -> float:
    """Product of per-beam Gaussian likelihoods (0 outside free space)."""
    p = particle.pose
    single = ParticleSet([p.x], [p.y], [p.theta], [particle.weight])
    lw = log_weights(single, scan, grid, config, workers=1)[0]
    return 0.0 if lw == -np.inf else math.exp(lw)


def normalize(log_w: np.ndarray) -> tuple[np.ndarray, float]:
    """Max-shifted exponentiation. Returns normalized weights and log of the mean raw weight."""
    top = np.max(log_w)
    if top == -np.inf:
        return np.zeros_like(log_w), -math.inf
    w = np.exp(log_w - top)
    total = w.sum()
    return w / total, float(top + math.log(total) - math.log(len(log_w)))


def systematic_indices(weights: np.ndarray, u0: float) -> np.ndarray:
    n = len(weights)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    positions = (u0 + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def _select(pset: ParticleSet, config: McLConfig, rng: np.random.Generator,
            grid: OccupancyGrid | None) -> tuple[ParticleSet, bool]:
    """Systematic selection; returns the survivors and whether a full reinitialization happened."""
    n = len(pset)
    total = pset.weight.sum()
    if not total > 0:
        if grid is None:
            raise LocalizationError("all particle weights are zero and no grid for reinitialization")
        fresh = init_particles(grid, replace(config, particle_count=n), rng)
        fresh.generation = pset.generation + 1
        return fresh, True
    out = pset.take(systematic_indices(pset.weight / total, float(rng.random())))
    out.weight = np.full(n, 1.0 / n)
    out.generation = pset.generation + 1
    return out, False


def _inject(pset: ParticleSet, config: McLConfig, rng: np.random.Generator, grid: OccupancyGrid | None,
            log_mean_weight: float) -> ParticleSet:
    low_fitness = config.injection_threshold > 0 and log_mean_weight < math.log(config.injection_threshold)
    m = int(round(config.injection_fraction * len(pset)))
    if grid is None or not low_fitness or m == 0:
        return pset
    out = pset.copy()
    slots = rng.choice(len(pset), size=m, replace=False)
    out.x[slots], out.y[slots], out.theta[slots] = _uniform_poses(grid, m, rng)
    return out


def resample(pset: ParticleSet, config: McLConfig, rng: np.random.Generator,
             grid: OccupancyGrid | None = None, log_mean_weight: float | None = None) -> ParticleSet:
    """Low-variance resampling with random injection when overall fitness is low.

    ``pset.weight`` may be raw or normalized. ``log_mean_weight`` is the log of
    the mean raw weight; when omitted it is taken from ``pset.weight``.
    All-zero weights trigger a full reinitialization (requires ``grid``).
    """
    if log_mean_weight is None:
        total = pset.weight.sum()
        log_mean_weight = math.log(total / len(pset)) if total > 0 else -math.inf
    out, reset = _select(pset, config, rng, grid)
    return out if reset else _inject(out, config, rng, grid, log_mean_weight)


def estimate_pose(pset: ParticleSet) -> Pose:
    """Weighted mean position and weighted circular mean heading."""
    if len(pset) == 0:
        raise LocalizationError("empty particle set")
    w = pset.weight
    total = w.sum()
    w = np.full(len(pset), 1.0 / len(pset)) if not total > 0 else w / total
    x = float(np.dot(w, pset.x))
    y = float(np.dot(w, pset.y))
    theta = math.atan2(float(np.dot(w, np.sin(pset.theta))), float(np.dot(w, np.cos(pset.theta))))
    return Pose(x, y, theta)


def best_particle(pset: ParticleSet) -> Pose:
    i = int(np.argmax(pset.weight))
    return Pose(pset.x[i], pset.y[i], pset.theta[i])


def mcl_step(pset: ParticleSet, command: MoveCommand, scan: LidarScan, grid: OccupancyGrid,
             config: McLConfig, rng: np.random.Generator) -> tuple[ParticleSet, Pose]:
    """motion update -> sensor weighting -> resampling -> pose estimate.

    The estimate is taken over the resampled survivors; particles injected in
    the same step are fresh guesses and carry no evidence yet.
    """
    moved = motion_update(pset, command, config, rng)
    lw = log_weights(moved, scan, grid, config)
    moved.weight, log_mean = normalize(lw)
    survivors, reset = _select(moved, config, rng, grid)
    if config.estimator == "max":
        estimate = best_particle(moved) if not reset else estimate_pose(survivors)
    else:
        estimate = estimate_pose(survivors)
    out = survivors if reset else _inject(survivors, config, rng, grid, log_mean)
    return out, estimate
