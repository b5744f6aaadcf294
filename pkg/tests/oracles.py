"""Slow, obviously-correct reference implementations used by the test suite."""

from __future__ import annotations

import math
from collections import deque

import numpy as np


def bfs_cost(cells: np.ndarray, start, goal):
    """Unit-cost 4-connected shortest path length, or None when unreachable."""
    h, w = cells.shape
    if cells[start] or cells[goal]:
        return None
    dist = {tuple(start): 0}
    q = deque([tuple(start)])
    while q:
        r, c = q.popleft()
        if (r, c) == tuple(goal):
            return dist[(r, c)]
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not cells[nr, nc] and (nr, nc) not in dist:
                dist[(nr, nc)] = dist[(r, c)] + 1
                q.append((nr, nc))
    return None


def dijkstra_expanded(cells: np.ndarray, start, goal) -> int:
    """Number of cells settled by uniform-cost search before the goal is popped."""
    import heapq

    h, w = cells.shape
    seen = set()
    heap = [(0, tuple(start))]
    best = {tuple(start): 0}
    while heap:
        d, cell = heapq.heappop(heap)
        if cell in seen:
            continue
        seen.add(cell)
        if cell == tuple(goal):
            return len(seen)
        r, c = cell
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = (r + dr, c + dc)
            if 0 <= nb[0] < h and 0 <= nb[1] < w and not cells[nb] and d + 1 < best.get(nb, math.inf):
                best[nb] = d + 1
                heapq.heappush(heap, (d + 1, nb))
    return len(seen)


def fine_step_ray(cells: np.ndarray, res: float, x: float, y: float, angle: float, max_range: float,
                  step_cells: float = 0.01) -> float:
    """March along the ray in tiny steps until the sample lands in an occupied or outside cell."""
    h, w = cells.shape
    step = step_cells * res
    dx, dy = math.cos(angle), math.sin(angle)
    t = 0.0
    while t <= max_range:
        px, py = x + t * dx, y + t * dy
        col, row = math.floor(px / res), math.floor(py / res)
        if not (0 <= row < h and 0 <= col < w) or cells[row, col]:
            return t
        t += step
    return max_range


def naive_log_weight(cells, res, pose, rel_angles, measured, max_range, sigma) -> float:
    total = 0.0
    for a, m in zip(rel_angles, measured):
        d = fine_step_ray(cells, res, pose.x, pose.y, pose.theta + a, max_range, step_cells=0.001)
        total += -math.log(sigma * math.sqrt(2 * math.pi)) - (m - d) ** 2 / (2 * sigma ** 2)
    return total


def busy_period_response(tasks, index: int):
    """First-job response time of ``tasks[index]`` from a synchronous release, by unit-step simulation.

    Tasks of equal priority are served before the task under analysis (its
    worst case). Returns None if the first job misses its period.
    """
    me = tasks[index]
    remaining = {i: 0 for i in range(len(tasks))}
    horizon = me.period
    for t in range(horizon + 1):
        for i, task in enumerate(tasks):
            if (i == index and t == 0) or (i != index and task.priority <= me.priority and t % task.period == 0):
                remaining[i] += task.wcet
        if t == horizon:
            break
        ready = [i for i in remaining if remaining[i] > 0 and (i == index or tasks[i].priority <= me.priority)]
        if not ready:
            continue
        run = min(ready, key=lambda i: (tasks[i].priority, i == index, i))
        remaining[run] -= 1
        if run == index and remaining[index] == 0:
            return t + 1
    return None


def pairwise_overlaps(intervals) -> list[tuple[int, int]]:
    """All (i, j), i < j, of (start, end, src) intervals from distinct sources that intersect."""
    out = []
    for i in range(len(intervals)):
        for j in range(i + 1, len(intervals)):
            a, b = intervals[i], intervals[j]
            if a[2] != b[2] and a[0] < b[1] and b[0] < a[1]:
                out.append((i, j))
    return out
