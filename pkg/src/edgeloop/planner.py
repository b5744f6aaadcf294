"""A* on the occupancy grid, path-to-command translation and the pre-motion obstacle check."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .worldmodel import LidarScan, MoveCommand, OccupancyGrid, Pose, halt_command, normalize_angle

Cell = tuple[int, int]
NEIGHBORS = ((-1, 0), (0, -1), (0, 1), (1, 0))


class PlanningError(ValueError):
    pass


class NoPathError(PlanningError):
    pass


class InvalidCellError(PlanningError):
    pass


@dataclass
class GridPath:
    waypoints: list[Cell]
    cost: float
    expanded: int = field(default=0, compare=False)


@dataclass(frozen=True)
class PlannerConfig:
    v_max: float = 0.5
    omega_max: float = 1.0
    heading_tol: float = 0.15
    half_width: float = 0.15
    safety_margin: float = 0.05


def _check_cell(grid: OccupancyGrid, cell: Cell, what: str) -> None:
    if not grid.in_bounds(*cell):
        raise InvalidCellError(f"{what} {cell} is out of bounds")
    if grid.cells[cell]:
        raise InvalidCellError(f"{what} {cell} is occupied")


def astar(grid: OccupancyGrid, start: Cell, goal: Cell) -> GridPath:
    """Minimum-cost 4-connected path with the Manhattan heuristic.

    Ties on f are broken by the smaller ``(row, col)``.
    """
    start, goal = tuple(start), tuple(goal)
    _check_cell(grid, start, "start")
    _check_cell(grid, goal, "goal")
    gr, gc = goal
    g_cost = {start: 0}
    parent: dict[Cell, Cell] = {}
    closed: set[Cell] = set()
    heap = [(abs(start[0] - gr) + abs(start[1] - gc), start[0], start[1])]
    expanded = 0
    while heap:
        f, r, c = heapq.heappop(heap)
        cell = (r, c)
        if cell in closed:
            continue
        closed.add(cell)
        expanded += 1
        if cell == goal:
            path = [cell]
            while path[-1] != start:
                path.append(parent[path[-1]])
            path.reverse()
            return GridPath(path, float(g_cost[goal]), expanded)
        g = g_cost[cell] + 1
        for dr, dc in NEIGHBORS:
            nb = (r + dr, c + dc)
            if nb in closed or not grid.is_free(*nb):
                continue
            if g < g_cost.get(nb, math.inf):
                g_cost[nb] = g
                parent[nb] = cell
                heapq.heappush(heap, (g + abs(nb[0] - gr) + abs(nb[1] - gc), nb[0], nb[1]))
    raise NoPathError(f"goal {goal} unreachable from {start}")


def nearest_free(grid: OccupancyGrid, cell: Cell) -> Cell:
    """Closest free cell by grid distance, clamping out-of-bounds input first."""
    r = min(max(cell[0], 0), grid.height - 1)
    c = min(max(cell[1], 0), grid.width - 1)
    if not grid.cells[r, c]:
        return (r, c)
    free = grid.free_cells()
    if len(free) == 0:
        raise InvalidCellError("grid has no free cell")
    d = np.abs(free[:, 0] - r) + np.abs(free[:, 1] - c)
    i = int(np.argmin(d))
    return int(free[i, 0]), int(free[i, 1])


def path_to_command(path: GridPath, current_pose: Pose, config: PlannerConfig, resolution: float,
                    sequence: int = 0) -> MoveCommand:
    """Next primitive along ``path``: turn in place toward the next waypoint, else drive one cell."""
    if len(path.waypoints) < 2:
        return halt_command(sequence)
    r, c = path.waypoints[1]
    tx, ty = (c + 0.5) * resolution, (r + 0.5) * resolution
    err = normalize_angle(math.atan2(ty - current_pose.y, tx - current_pose.x) - current_pose.theta)
    if abs(err) > config.heading_tol:
        duration = int(math.floor(abs(err) / config.omega_max * 1000.0 + 0.5))
        return MoveCommand(0.0, math.copysign(config.omega_max, err), duration, sequence)
    duration = int(math.floor(resolution / config.v_max * 1000.0 + 0.5))
    return MoveCommand(config.v_max, 0.0, duration, sequence)


def travel_distance(command: MoveCommand) -> float:
    return abs(command.v) * command.duration_ms / 1000.0


def obstacle_check(scan: LidarScan, command: MoveCommand, safety_margin: float,
                   half_width: float = 0.15) -> bool:
    """True when no sample inside the swept corridor is closer than travel + margin."""
    travel = travel_distance(command)
    if travel == 0.0:
        return True
    heading = 0.0 if command.v > 0 else math.pi
    half_angle = math.atan2(half_width + safety_margin, travel)
    rel = np.remainder(scan.angles - heading + np.pi, 2.0 * np.pi) - np.pi
    in_corridor = np.abs(rel) <= half_angle
    return not np.any(scan.distances[in_corridor] < travel + safety_margin)
