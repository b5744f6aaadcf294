from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgeloop.planner import (
    InvalidCellError, NoPathError, PlannerConfig, astar, nearest_free, obstacle_check, path_to_command,
)
from edgeloop.worldmodel import LidarScan, MoveCommand, OccupancyGrid, Pose, halt_command, scan_angles
from oracles import bfs_cost, dijkstra_expanded


def test_start_equals_goal():
    p = astar(OccupancyGrid.empty(3, 3), (1, 1), (1, 1))
    assert p.waypoints == [(1, 1)] and p.cost == 0


def test_empty_3x3_corner_to_corner():
    p = astar(OccupancyGrid.empty(3, 3), (0, 0), (2, 2))
    assert p.cost == 4 and len(p.waypoints) == 5


def test_enclosed_goal_unreachable():
    cells = np.zeros((5, 5), dtype=bool)
    cells[1:4, 1:4] = True
    cells[2, 2] = False
    with pytest.raises(NoPathError):
        astar(OccupancyGrid(cells, 1.0), (0, 0), (2, 2))


@pytest.mark.parametrize("start,goal", [((0, 0), (9, 9)), ((1, 1), (0, 0)), ((-1, 0), (2, 2))])
def test_invalid_cells(start, goal):
    cells = np.zeros((4, 4), dtype=bool)
    cells[1, 1] = True
    with pytest.raises(InvalidCellError):
        astar(OccupancyGrid(cells, 1.0), start, goal)


def test_tie_breaking_is_deterministic():
    p = astar(OccupancyGrid.empty(4, 4), (0, 0), (3, 3))
    assert p.waypoints == astar(OccupancyGrid.empty(4, 4), (0, 0), (3, 3)).waypoints
    assert p.waypoints[1] == (0, 1)


@given(st.integers(2, 12), st.integers(2, 12), st.floats(0.0, 0.4), st.integers(0, 2**32 - 1))
def test_path_is_valid_and_optimal(h, w, density, seed):
    rng = np.random.default_rng(seed)
    cells = rng.random((h, w)) < density
    free = np.argwhere(~cells)
    if len(free) < 2:
        return
    s, g = (tuple(int(v) for v in free[i]) for i in rng.choice(len(free), 2, replace=False))
    grid = OccupancyGrid(cells, 1.0)
    want = bfs_cost(cells, s, g)
    if want is None:
        with pytest.raises(NoPathError):
            astar(grid, s, g)
        return
    p = astar(grid, s, g)
    assert p.cost == want == len(p.waypoints) - 1
    assert p.waypoints[0] == s and p.waypoints[-1] == g
    for a, b in zip(p.waypoints, p.waypoints[1:]):
        assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1 and not cells[b]
    assert p.expanded <= dijkstra_expanded(cells, s, g)


def test_nearest_free_clamps_and_searches(walled_room):
    assert nearest_free(walled_room, (0, 0)) in {(1, 1)}
    assert nearest_free(walled_room, (50, 50)) == (8, 8)
    assert nearest_free(walled_room, (3, 3)) == (3, 3)


def test_path_to_command_at_goal():
    p = astar(OccupancyGrid.empty(3, 3), (1, 1), (1, 1))
    assert path_to_command(p, Pose(1.5, 1.5, 0.0), PlannerConfig(), 1.0).is_halt


def test_path_to_command_drives_one_cell():
    p = astar(OccupancyGrid.empty(4, 1), (0, 0), (0, 3))
    cmd = path_to_command(p, Pose(0.5, 0.5, 0.0), PlannerConfig(v_max=0.5), 1.0)
    assert (cmd.v, cmd.omega, cmd.duration_ms) == (0.5, 0.0, 2000)


def test_path_to_command_rotates_first():
    p = astar(OccupancyGrid.empty(1, 3), (0, 0), (2, 0))
    cmd = path_to_command(p, Pose(0.5, 0.5, 0.0), PlannerConfig(heading_tol=0.1, omega_max=1.0), 1.0)
    assert cmd.v == 0.0 and cmd.omega > 0
    assert cmd.duration_ms == round(math.pi / 2 * 1000)


@given(st.floats(-math.pi, math.pi), st.integers(0, 3), st.integers(0, 3))
def test_command_within_limits(th, r, c):
    cfg = PlannerConfig(v_max=0.4, omega_max=0.8)
    p = astar(OccupancyGrid.empty(4, 4), (r, c), (3 - r, 3 - c))
    cmd = path_to_command(p, Pose(c + 0.5, r + 0.5, th), cfg, 1.0)
    assert abs(cmd.v) <= cfg.v_max and abs(cmd.omega) <= cfg.omega_max


def _scan(front: float, rest: float = 10.0, width: float = 0.5) -> LidarScan:
    angles = scan_angles(360)
    rel = np.remainder(angles + np.pi, 2 * np.pi) - np.pi
    return LidarScan(angles, np.where(np.abs(rel) < width, front, rest))


def test_halt_always_passes():
    assert obstacle_check(_scan(0.01), halt_command(), 0.2)


def test_obstruction_fails():
    assert not obstacle_check(_scan(0.5), MoveCommand(0.5, 0.0, 2000), 0.2)


def test_clear_corridor_passes():
    # corridor half-angle atan2(0.35, 1.0) ~ 0.34 rad, inside the 0.5 rad clear window
    assert obstacle_check(_scan(1.25, 0.3), MoveCommand(0.5, 0.0, 2000), 0.2, half_width=0.15)
    assert not obstacle_check(_scan(1.25, 0.3, width=0.2), MoveCommand(0.5, 0.0, 2000), 0.2, half_width=0.15)


def test_obstacle_behind_matters_only_when_reversing():
    scan = LidarScan(scan_angles(360), np.where(np.abs(scan_angles(360) - math.pi) < 0.3, 0.3, 10.0))
    assert obstacle_check(scan, MoveCommand(0.5, 0.0, 2000), 0.2)
    assert not obstacle_check(scan, MoveCommand(-0.5, 0.0, 2000), 0.2)
