"""Numba-compiled inner loops.

Everything here is written against plain arrays so it can be compiled
with ``numba.njit`` and, where iterations are independent, parallelized
with ``prange``.  Grid marking uses a two-pass scheme so the parallel
version is bit-deterministic: pass one only ever writes the constant
FREE into cells, so racing beams are benign, and pass two overwrites
with OCCUPIED afterwards (occupied always beats free).
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# Cell marks in the per-scan dense grid.
UNOBSERVED = np.uint8(0)
FREE = np.uint8(1)
OCCUPIED = np.uint8(2)


@njit(cache=True)
def _floor_div(v, delta):
    return np.int64(np.floor(v / delta))


@njit(cache=True, parallel=True)
def mark_free_paths(grid, ix0, iy0, iz0, origin, ends, delta):
    """Mark voxels crossed by each origin->end segment as FREE.

    `grid` is a dense uint8 block whose voxel (ix, iy, iz) lives at
    ``grid[ix - ix0, iy - iy0, iz - iz0]``.  The terminal voxel of each
    segment is skipped (it belongs to the occupied pass), and writes
    outside the block are dropped.  All writes store the same constant,
    so concurrent beams never conflict.
    """
    nx, ny, nz = grid.shape
    ox, oy, oz = origin[0], origin[1], origin[2]
    for b in prange(ends.shape[0]):
        ex_f = ends[b, 0]
        ey_f = ends[b, 1]
        ez_f = ends[b, 2]
        vx = _floor_div(ox, delta)
        vy = _floor_div(oy, delta)
        vz = _floor_div(oz, delta)
        tx = _floor_div(ex_f, delta)
        ty = _floor_div(ey_f, delta)
        tz = _floor_div(ez_f, delta)

        dx = ex_f - ox
        dy = ey_f - oy
        dz = ez_f - oz

        step_x = np.int64(0)
        t_max_x = np.inf
        t_del_x = np.inf
        if dx > 0.0:
            step_x = np.int64(1)
            t_max_x = ((vx + 1) * delta - ox) / dx
            t_del_x = delta / dx
        elif dx < 0.0:
            step_x = np.int64(-1)
            t_max_x = (vx * delta - ox) / dx
            t_del_x = -delta / dx

        step_y = np.int64(0)
        t_max_y = np.inf
        t_del_y = np.inf
        if dy > 0.0:
            step_y = np.int64(1)
            t_max_y = ((vy + 1) * delta - oy) / dy
            t_del_y = delta / dy
        elif dy < 0.0:
            step_y = np.int64(-1)
            t_max_y = (vy * delta - oy) / dy
            t_del_y = -delta / dy

        step_z = np.int64(0)
        t_max_z = np.inf
        t_del_z = np.inf
        if dz > 0.0:
            step_z = np.int64(1)
            t_max_z = ((vz + 1) * delta - oz) / dz
            t_del_z = delta / dz
        elif dz < 0.0:
            step_z = np.int64(-1)
            t_max_z = (vz * delta - oz) / dz
            t_del_z = -delta / dz

        # The walk takes exactly this many voxel boundary crossings if
        # float noise never misorders a step; the bound makes the loop
        # finite either way.
        steps_left = abs(tx - vx) + abs(ty - vy) + abs(tz - vz)
        while not (vx == tx and vy == ty and vz == tz):
            gx = vx - ix0
            gy = vy - iy0
            gz = vz - iz0
            if 0 <= gx < nx and 0 <= gy < ny and 0 <= gz < nz:
                grid[gx, gy, gz] = FREE
            if steps_left <= 0:
                break
            steps_left -= 1
            if t_max_x <= t_max_y and t_max_x <= t_max_z:
                vx += step_x
                t_max_x += t_del_x
            elif t_max_y <= t_max_z:
                vy += step_y
                t_max_y += t_del_y
            else:
                vz += step_z
                t_max_z += t_del_z


@njit(cache=True, parallel=True)
def reduce_occupied_columns(
    grid,
    ix0,
    iy0,
    iz0,
    col_start,
    col_count,
    occ_ix,
    occ_iy,
    occ_iz,
    occ_z,
    out_height,
    out_valid,
):
    """Reduce each column of occupied voxels to one height, or drop it.

    Columns are contiguous slices of the (ix, iy, iz)-sorted
    occupied-voxel arrays.  A column is dropped when any FREE mark sits
    below its lowest occupied voxel; otherwise the run of consecutive
    occupied voxels starting at the bottom is walked and the maximum
    unquantized z over that run is emitted.
    """
    for c in prange(col_start.shape[0]):
        s = col_start[c]
        m = col_count[c]
        first_iz = occ_iz[s]
        gx = occ_ix[s] - ix0
        gy = occ_iy[s] - iy0
        dropped = False
        for gz in range(0, first_iz - iz0):
            if grid[gx, gy, gz] == FREE:
                dropped = True
                break
        if dropped:
            out_valid[c] = 0
            out_height[c] = np.nan
            continue
        best = occ_z[s]
        prev_iz = first_iz
        for j in range(s + 1, s + m):
            if occ_iz[j] != prev_iz + 1:
                break
            prev_iz = occ_iz[j]
            if occ_z[j] > best:
                best = occ_z[j]
        out_valid[c] = 1
        out_height[c] = best


@njit(cache=True)
def _ground_height(heights, gx0, gy0, inv_res, x, y):
    """Bilinear terrain height at (x, y); -inf outside the field."""
    nx, ny = heights.shape
    fx = (x - gx0) * inv_res
    fy = (y - gy0) * inv_res
    if fx < 0.0 or fy < 0.0 or fx > nx - 1 or fy > ny - 1:
        return -np.inf
    i = int(np.floor(fx))
    j = int(np.floor(fy))
    if i > nx - 2:
        i = nx - 2
    if j > ny - 2:
        j = ny - 2
    ax = fx - i
    ay = fy - j
    h00 = heights[i, j]
    h10 = heights[i + 1, j]
    h01 = heights[i, j + 1]
    h11 = heights[i + 1, j + 1]
    return (
        h00 * (1.0 - ax) * (1.0 - ay)
        + h10 * ax * (1.0 - ay)
        + h01 * (1.0 - ax) * ay
        + h11 * ax * ay
    )


@njit(cache=True, parallel=True)
def march_heightfield_rays(
    origin,
    dirs,
    heights,
    gx0,
    gy0,
    inv_res,
    max_range,
    step,
    refine_iters,
    out_range,
    out_hit,
):
    """First terrain intersection per ray by fixed-step marching.

    Marches each ray from `origin` along `dirs[b]` until the ray point
    drops to (or below) the terrain surface, then refines the bracket
    with `refine_iters` bisection steps and reports the bracket midpoint
    as the hit range.  Rays that never cross within `max_range` report
    no hit.
    """
    ox, oy, oz = origin[0], origin[1], origin[2]
    for b in prange(dirs.shape[0]):
        dx = dirs[b, 0]
        dy = dirs[b, 1]
        dz = dirs[b, 2]
        t_prev = 0.0
        t = step
        hit = False
        while t <= max_range:
            x = ox + t * dx
            y = oy + t * dy
            z = oz + t * dz
            if z <= _ground_height(heights, gx0, gy0, inv_res, x, y):
                hit = True
                break
            t_prev = t
            t += step
        if not hit:
            out_hit[b] = 0
            out_range[b] = np.nan
            continue
        lo, hi = t_prev, t
        for _ in range(refine_iters):
            t_mid = 0.5 * (lo + hi)
            xm = ox + t_mid * dx
            ym = oy + t_mid * dy
            zm = oz + t_mid * dz
            if zm <= _ground_height(heights, gx0, gy0, inv_res, xm, ym):
                hi = t_mid
            else:
                lo = t_mid
        out_hit[b] = 1
        out_range[b] = 0.5 * (lo + hi)
