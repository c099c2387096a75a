"""Synthetic catchments: fractal terrain plus a mass-conserving flood solver.

The solver is a relaxation scheme on the water surface: each cell pushes
water downhill to its four neighbours, at most a quarter of its depth per
neighbour and at most a quarter of the surface difference, which keeps the
update stable and non-negative. With closed boundaries total water volume
is conserved to float64 rounding; with open boundaries water that crosses
the domain edge leaves the system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError

CM_PER_M = 100.0


@dataclass
class Dem:
    """Ground elevations in meters on a square grid."""

    elevations: np.ndarray
    cell_size: float

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        if self.elevations.ndim != 2:
            raise DimensionError("DEM must be a 2-D grid")
        if not np.isfinite(self.elevations).all():
            raise NumericError("DEM contains non-finite elevations")

    @property
    def shape(self):
        return self.elevations.shape


@dataclass
class RainEvent:
    """Uniform rainfall depths (cm) added at each mapping step."""

    per_step_cm: np.ndarray

    def __post_init__(self):
        self.per_step_cm = np.asarray(self.per_step_cm, dtype=np.float64)
        if self.per_step_cm.ndim != 1:
            raise ContractError("rainfall must be a 1-D sequence of depths")
        if (self.per_step_cm < 0).any():
            raise ContractError("rainfall depths must be non-negative")

    @property
    def step_count(self):
        return len(self.per_step_cm)

    @property
    def total_cm(self):
        return float(self.per_step_cm.sum())


@dataclass
class DepthGrid:
    """Water depths in centimeters on a square grid."""

    depths: np.ndarray
    cell_size: float
    timestamp_index: int = 0

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim != 2:
            raise DimensionError("depth grid must be 2-D")
        if not np.isfinite(self.depths).all():
            raise NumericError("depth grid contains non-finite values")
        if (self.depths < 0).any():
            raise ContractError("depths must be non-negative")

    @property
    def shape(self):
        return self.depths.shape


def _is_pow2(n):
    return n >= 2 and (n & (n - 1)) == 0


def generate_dem(seed, size, roughness, relief, tilt=0.3, cell_size=10.0):
    """Diamond-square fractal surface, optionally tilted to force drainage.

    size must be a power of two or a power of two plus one; a 2^k grid is
    produced by generating 2^k+1 points and dropping the last row/column.
    roughness in [0, 1] controls how fast displacement amplitudes decay;
    relief bounds the total elevation range in meters. tilt is the fraction
    of the range given to a linear gradient (0 disables it).
    """
    if not (_is_pow2(size) or _is_pow2(size - 1)):
        raise ContractError(f"size {size} is not 2^k or 2^k+1")
    if not 0.0 <= roughness <= 1.0:
        raise ContractError("roughness must be within [0, 1]")
    if relief < 0:
        raise ContractError("relief must be non-negative")
    if not 0.0 <= tilt <= 1.0:
        raise ContractError("tilt fraction must be within [0, 1]")

    n = size if _is_pow2(size - 1) else size + 1
    rng = np.random.default_rng(seed)
    grid = np.zeros((n, n), dtype=np.float64)
    last = n - 1
    grid[0, 0], grid[0, last], grid[last, 0], grid[last, last] = rng.uniform(-1, 1, 4)

    amp = 0.5
    step = last
    while step > 1:
        half = step // 2
        # diamond: centers from the four surrounding corners
        cr = np.arange(half, n, step)
        cc = np.arange(half, n, step)
        ri, ci = np.meshgrid(cr, cc, indexing="ij")
        corners = (
            grid[ri - half, ci - half]
            + grid[ri - half, ci + half]
            + grid[ri + half, ci - half]
            + grid[ri + half, ci + half]
        )
        grid[ri, ci] = corners / 4.0 + rng.uniform(-1, 1, ri.shape) * amp
        # square: edge midpoints from their (up to four) axial neighbours
        for r0, c0 in ((0, half), (half, 0)):
            rr = np.arange(r0, n, step)
            cc2 = np.arange(c0, n, step)
            ri2, ci2 = np.meshgrid(rr, cc2, indexing="ij")
            total = np.zeros(ri2.shape, dtype=np.float64)
            count = np.zeros(ri2.shape, dtype=np.float64)
            for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
                r3, c3 = ri2 + dr, ci2 + dc
                ok = (r3 >= 0) & (r3 < n) & (c3 >= 0) & (c3 < n)
                total[ok] += grid[r3[ok], c3[ok]]
                count[ok] += 1
            grid[ri2, ci2] = total / count + rng.uniform(-1, 1, ri2.shape) * amp
        amp *= roughness
        step = half

    lo, hi = grid.min(), grid.max()
    fractal = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)

    if tilt > 0:
        theta = rng.uniform(0, 2 * np.pi)
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        plane = (np.cos(theta) * ii + np.sin(theta) * jj) / last
        plane = (plane - plane.min()) / max(plane.max() - plane.min(), 1e-12)
        combined = (1.0 - tilt) * fractal + tilt * plane
    else:
        combined = fractal

    elev = combined * relief
    return Dem(elevations=elev[:size, :size], cell_size=cell_size)


_SHIFTS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _relax_once(elev, depth_m, boundary):
    """One synchronous relaxation pass; depths in meters."""
    surface = elev + depth_m
    quarter = depth_m * 0.25
    outflow = np.zeros_like(depth_m)
    inflow = np.zeros_like(depth_m)
    for dr, dc in _SHIFTS:
        neighbour = np.roll(surface, (-dr, -dc), axis=(0, 1))
        diff = surface - neighbour
        # the wrap-around rows/columns are not real neighbours
        edge = _edge_mask(depth_m.shape, dr, dc)
        diff[edge] = 0.0
        flow = np.minimum(quarter, diff * 0.25)
        np.maximum(flow, 0.0, out=flow)
        outflow += flow
        inflow += np.roll(flow, (dr, dc), axis=(0, 1))
        if boundary == "open":
            # outside is dry ground at the edge cell's own elevation
            edge_flow = np.zeros_like(depth_m)
            edge_flow[edge] = np.minimum(quarter[edge], depth_m[edge] * 0.25)
            outflow += edge_flow
    new_depth = depth_m - outflow + inflow
    if new_depth.min() < -1e-9:
        raise NumericError("flood solver produced negative depth")
    np.maximum(new_depth, 0.0, out=new_depth)
    return new_depth


def _edge_mask(shape, dr, dc):
    mask = np.zeros(shape, dtype=bool)
    if dr == -1:
        mask[0, :] = True
    elif dr == 1:
        mask[-1, :] = True
    if dc == -1:
        mask[:, 0] = True
    elif dc == 1:
        mask[:, -1] = True
    return mask


def simulate_flood(dem, rain, relax_iters, boundary="closed", rain_mask=None):
    """Run rainfall over a DEM; returns one DepthGrid per rain step.

    Each step adds that step's rainfall everywhere (scaled by rain_mask if
    given), then applies relax_iters relaxation passes.
    """
    if relax_iters < 1:
        raise ContractError("relax_iters must be >= 1")
    if boundary not in ("closed", "open"):
        raise ContractError(f"unknown boundary {boundary!r}")
    elev = dem.elevations
    if rain_mask is not None:
        rain_mask = np.asarray(rain_mask, dtype=np.float64)
        if rain_mask.shape != elev.shape:
            raise DimensionError("rain mask must match the DEM grid")
        if (rain_mask < 0).any():
            raise ContractError("rain mask must be non-negative")

    depth_m = np.zeros_like(elev)
    frames = []
    for step_index, rain_cm in enumerate(rain.per_step_cm):
        added = rain_cm / CM_PER_M
        if rain_mask is None:
            depth_m += added
        else:
            depth_m += added * rain_mask
        for _ in range(relax_iters):
            depth_m = _relax_once(elev, depth_m, boundary)
        frames.append(
            DepthGrid(
                depths=depth_m * CM_PER_M,
                cell_size=dem.cell_size,
                timestamp_index=step_index,
            )
        )
    return frames


def water_volume(depth_grid_or_array, cell_size=None):
    """Total water volume in m^3 of a depth field in cm."""
    if isinstance(depth_grid_or_array, DepthGrid):
        depths = depth_grid_or_array.depths
        cell = depth_grid_or_array.cell_size
    else:
        depths = np.asarray(depth_grid_or_array, dtype=np.float64)
        cell = cell_size
    return float(depths.sum()) / CM_PER_M * cell * cell


def coarsen(grid, factor):
    """Block mean over factor x factor cells."""
    grid = np.asarray(grid)
    if factor < 1 or int(factor) != factor:
        raise ContractError("coarsening factor must be a positive integer")
    factor = int(factor)
    if factor == 1:
        return grid.copy()
    h, w = grid.shape
    if h % factor or w % factor:
        raise ContractError(f"grid {h}x{w} not divisible by factor {factor}")
    return grid.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def coarsen_dem(dem, factor):
    """Block-averaged DEM with proportionally larger cells."""
    return Dem(elevations=coarsen(dem.elevations, factor), cell_size=dem.cell_size * factor)
