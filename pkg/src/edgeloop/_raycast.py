"""Compiled grid-traversal kernels shared by the sensor simulator and the MCL sensor model."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

INVALID = -1.0


@njit(cache=True, nogil=True)
def cast_one(occ, res, x, y, angle, max_range):
    """Exact cell traversal; returns INVALID for an origin outside free space."""
    h, w = occ.shape
    gx = x / res
    gy = y / res
    ix = int(math.floor(gx))
    iy = int(math.floor(gy))
    if ix < 0 or iy < 0 or ix >= w or iy >= h:
        return INVALID
    if occ[iy, ix]:
        return INVALID
    dx = math.cos(angle)
    dy = math.sin(angle)
    max_t = max_range / res
    inf = math.inf
    if dx > 0.0:
        step_x = 1
        t_max_x = (ix + 1 - gx) / dx
        t_dx = 1.0 / dx
    elif dx < 0.0:
        step_x = -1
        t_max_x = (gx - ix) / -dx
        t_dx = -1.0 / dx
    else:
        step_x = 0
        t_max_x = inf
        t_dx = inf
    if dy > 0.0:
        step_y = 1
        t_max_y = (iy + 1 - gy) / dy
        t_dy = 1.0 / dy
    elif dy < 0.0:
        step_y = -1
        t_max_y = (gy - iy) / -dy
        t_dy = -1.0 / dy
    else:
        step_y = 0
        t_max_y = inf
        t_dy = inf
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            ix += step_x
            t_max_x += t_dx
        else:
            t = t_max_y
            iy += step_y
            t_max_y += t_dy
        if t >= max_t:
            return max_range
        if ix < 0 or iy < 0 or ix >= w or iy >= h or occ[iy, ix]:
            return t * res


@njit(cache=True, nogil=True)
def cast_fan(occ, res, x, y, theta, rel_angles, max_range, out):
    for j in range(rel_angles.shape[0]):
        out[j] = cast_one(occ, res, x, y, theta + rel_angles[j], max_range)


@njit(cache=True, nogil=True)
def beam_loglik(occ, res, xs, ys, thetas, rel_angles, measured, max_range, sigma, out, lo, hi):
    """Gaussian beam log-likelihood for particles ``lo:hi``; ``-inf`` outside free space."""
    norm = -math.log(sigma * math.sqrt(2.0 * math.pi))
    inv = 1.0 / (2.0 * sigma * sigma)
    nb = rel_angles.shape[0]
    for i in range(lo, hi):
        acc = 0.0
        for j in range(nb):
            d = cast_one(occ, res, xs[i], ys[i], thetas[i] + rel_angles[j], max_range)
            if d < 0.0:
                acc = -math.inf
                break
            e = measured[j] - d
            acc += norm - e * e * inv
        out[i] = acc


def warmup() -> None:
    occ = np.zeros((2, 2), dtype=np.bool_)
    out = np.empty(1)
    beam_loglik(occ, 1.0, np.array([0.5]), np.array([0.5]), np.array([0.0]),
                np.array([0.0]), np.array([1.0]), 5.0, 1.0, out, 0, 1)
