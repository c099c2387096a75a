"""Terrain generation and the mass-conserving flood solver."""

import numpy as np
import pytest

from floodsr.errors import ContractError
from floodsr.terrain import (
    Dem,
    RainEvent,
    coarsen,
    coarsen_dem,
    generate_dem,
    simulate_flood,
    water_volume,
)


def test_dem_flat_degenerate():
    dem = generate_dem(0, 33, roughness=0.0, relief=0.0)
    np.testing.assert_array_equal(dem.elevations, 0.0)


def test_dem_deterministic():
    a = generate_dem(7, 64, 0.5, 10.0)
    b = generate_dem(7, 64, 0.5, 10.0)
    np.testing.assert_array_equal(a.elevations, b.elevations)


def test_dem_respects_relief_bounds():
    dem = generate_dem(7, 64, 0.5, 10.0)
    assert dem.elevations.min() >= 0.0
    assert dem.elevations.max() <= 10.0
    assert dem.shape == (64, 64)
    # frozen summary of the seed-7 surface; regenerating must reproduce it
    assert float(dem.elevations.mean()) == pytest.approx(5.403840775646515, rel=1e-12)


def test_dem_accepts_pow2_plus_one():
    dem = generate_dem(3, 65, 0.4, 5.0)
    assert dem.shape == (65, 65)


def test_dem_rejects_bad_size():
    with pytest.raises(ContractError):
        generate_dem(0, 60, 0.5, 1.0)
    with pytest.raises(ContractError):
        generate_dem(0, 64, 1.5, 1.0)


def test_zero_rain_zero_depth():
    dem = generate_dem(1, 32, 0.5, 5.0)
    frames = simulate_flood(dem, RainEvent(np.zeros(4)), relax_iters=5)
    assert len(frames) == 4
    for frame in frames:
        np.testing.assert_array_equal(frame.depths, 0.0)


def test_flat_dem_uniform_rain_equilibrium():
    dem = Dem(np.zeros((16, 16)), cell_size=10.0)
    frames = simulate_flood(dem, RainEvent([5.0]), relax_iters=20)
    np.testing.assert_allclose(frames[0].depths, 5.0)


def test_bowl_pools_at_minimum():
    n = 33
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    bowl = Dem(0.02 * ((ii - n // 2) ** 2 + (jj - n // 2) ** 2), cell_size=10.0)
    mask = np.zeros((n, n))
    mask[1, 1] = 1.0  # inject at the rim only
    injected_cm = 40.0
    frames = simulate_flood(
        bowl, RainEvent([injected_cm] + [0.0] * 80), relax_iters=30, rain_mask=mask
    )
    final = frames[-1].depths
    # volume balance: everything that went in is still there
    assert final.sum() == pytest.approx(injected_cm, rel=1e-9)
    # and it has migrated to the bowl bottom
    assert np.unravel_index(final.argmax(), final.shape) == (n // 2, n // 2)
    assert final[1, 1] < 1e-3


def test_mass_conservation_closed_boundary():
    for seed in range(4):
        dem = generate_dem(seed, 32, 0.6, 8.0)
        rain = RainEvent([2.0, 1.0] + [0.0] * 28)
        frames = simulate_flood(dem, rain, relax_iters=10)
        injected = rain.total_cm * dem.shape[0] * dem.shape[1]
        for frame in frames[2:]:
            assert frame.depths.sum() == pytest.approx(injected, rel=1e-9)
            assert frame.depths.min() >= 0.0


def test_open_boundary_loses_water():
    dem = Dem(np.zeros((16, 16)), cell_size=10.0)
    # tilt it so water runs toward one edge
    dem = Dem(dem.elevations + np.linspace(1.0, 0.0, 16)[None, :], cell_size=10.0)
    closed = simulate_flood(dem, RainEvent([5.0] + [0.0] * 19), 10, "closed")
    opened = simulate_flood(dem, RainEvent([5.0] + [0.0] * 19), 10, "open")
    assert opened[-1].depths.sum() < closed[-1].depths.sum()


def test_water_volume_units():
    grid = np.full((10, 10), 5.0)  # 5 cm over 100 cells of 10 m
    assert water_volume(grid, cell_size=10.0) == pytest.approx(0.05 * 100 * 100)


def test_simulate_rejects_bad_args():
    dem = Dem(np.zeros((8, 8)), cell_size=10.0)
    with pytest.raises(ContractError):
        simulate_flood(dem, RainEvent([1.0]), relax_iters=0)
    with pytest.raises(ContractError):
        simulate_flood(dem, RainEvent([1.0]), 5, boundary="periodic")
    with pytest.raises(ContractError):
        RainEvent([-1.0])


def test_coarsen_identity():
    grid = np.random.default_rng(0).uniform(size=(8, 8))
    np.testing.assert_array_equal(coarsen(grid, 1), grid)


def test_coarsen_constant():
    np.testing.assert_allclose(coarsen(np.full((8, 8), 3.7), 4), 3.7)


def test_coarsen_block_mean():
    np.testing.assert_array_equal(coarsen(np.array([[0.0, 2.0], [4.0, 6.0]]), 2), [[3.0]])


def test_coarsen_scaling_commutes():
    grid = np.random.default_rng(1).uniform(size=(16, 16))
    np.testing.assert_allclose(coarsen(2.5 * grid, 4), 2.5 * coarsen(grid, 4))


def test_coarsen_rejects_indivisible():
    with pytest.raises(ContractError):
        coarsen(np.zeros((9, 9)), 2)


def test_coarsen_dem_scales_cells():
    dem = generate_dem(2, 64, 0.5, 6.0, cell_size=10.0)
    coarse = coarsen_dem(dem, 4)
    assert coarse.cell_size == 40.0
    assert coarse.shape == (16, 16)
