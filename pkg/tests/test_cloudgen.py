import numpy as np
import pytest
from hypothesis import given, strategies as st

from skytomo.cloudgen import (SceneParams, advect, column_coverage, derive_maps, generate_scene,
                              make_sequence)
from skytomo.errors import GenerationError, InputError
from skytomo.geometry import GridSpec, LwcGrid

SMALL = GridSpec(dims=(64, 64, 64))


def _small_params(seed, coverage=0.2):
    return SceneParams(seed=seed, coverage_target=coverage, base_height_range=(400.0, 1000.0),
                       thickness_range=(75.0, 300.0), cell_radius_range=(100.0, 300.0))


def test_empty_scene():
    grid = generate_scene(SceneParams(cell_count_range=(0, 0)), SMALL)
    assert not grid.rho.any()


def test_same_seed_bit_identical():
    a = generate_scene(_small_params(11), SMALL)
    b = generate_scene(_small_params(11), SMALL)
    assert a.rho.tobytes() == b.rho.tobytes()
    c = generate_scene(_small_params(12), SMALL)
    assert a.rho.tobytes() != c.rho.tobytes()


def test_seed7_coverage_default_grid():
    grid = generate_scene(SceneParams(seed=7, coverage_target=0.3))
    assert abs(column_coverage(grid) - 0.3) <= 0.1


def test_param_validation():
    with pytest.raises(InputError):
        SceneParams(coverage_target=1.5)
    with pytest.raises(InputError):
        SceneParams(base_height_range=(1500.0, 500.0))


def test_unreachable_coverage_reports_diagnostics():
    # one tiny cell on a large footprint cannot cover 90 % of the columns
    p = SceneParams(seed=1, coverage_target=0.9, cell_count_range=(1, 1),
                    cell_radius_range=(10.0, 10.0), max_attempts=3)
    with pytest.raises(GenerationError) as info:
        generate_scene(p, SMALL)
    assert info.value.diagnostics["attempts"] == 3


def test_derive_maps_zero_grid():
    maps = derive_maps(LwcGrid.zeros(SMALL))
    assert not maps.occupancy.any() and not maps.lwp.any()


def test_derive_maps_hand_column():
    spec = GridSpec(dims=(4, 4, 80))
    rho = np.zeros(spec.dims)
    rho[1, 2, 40:44] = 0.001
    maps = derive_maps(LwcGrid(spec, rho))
    assert maps.lwp[1, 2] == pytest.approx(0.1, rel=1e-12)
    assert maps.cbh[1, 2] == 1000.0
    assert maps.dh[1, 2] == 100.0
    assert maps.occupancy.sum() == 1
    assert maps.cbh[0, 0] == 0.0 and maps.dh[0, 0] == 0.0


@pytest.mark.parametrize("seed", [0, 3, 7])
def test_generated_scene_contract(seed):
    p = _small_params(seed)
    grid = generate_scene(p, SMALL)
    maps = derive_maps(grid)
    occ = maps.occupancy
    assert occ.any()
    cbh = maps.cbh[occ]
    assert cbh.min() >= p.base_height_range[0] and cbh.max() <= p.base_height_range[1]
    # one contiguous run per cloudy column
    pos = grid.rho > 0
    starts = (pos[..., 1:] & ~pos[..., :-1]).sum(axis=2) + pos[..., 0]
    assert np.all(starts[occ] == 1)
    # LWP is the column sum
    np.testing.assert_allclose(maps.lwp, SMALL.sz * grid.rho.sum(axis=2), rtol=0, atol=0)
    np.testing.assert_allclose(maps.dh[occ], SMALL.sz * pos.sum(axis=2)[occ])


def test_advect_zero_velocity_identity():
    grid = generate_scene(_small_params(2), SMALL)
    assert np.array_equal(advect(grid, (0.0, 0.0), 30.0).rho, grid.rho)


def test_advect_one_voxel_is_exact_shift():
    grid = generate_scene(_small_params(2), SMALL)
    out = advect(grid, (5.0, 0.0), 5.0)          # 25 m = one voxel
    assert np.array_equal(out.rho, np.roll(grid.rho, 1, axis=0))
    out = advect(grid, (0.0, -2.5), 10.0)
    assert np.array_equal(out.rho, np.roll(grid.rho, -1, axis=1))


def test_advect_conserves_mass():
    grid = generate_scene(_small_params(4), SMALL)
    out = advect(grid, (5.0, 0.0), 5.0)
    assert abs(out.rho.sum() - grid.rho.sum()) <= 1e-3 * grid.rho.sum()
    out = advect(grid, (3.3, -1.7), 5.0)
    assert abs(out.rho.sum() - grid.rho.sum()) <= 1e-9 * grid.rho.sum()


@given(st.integers(-4, 4), st.integers(-4, 4), st.sampled_from([5.0, 10.0, 25.0]))
def test_advect_round_trip_whole_voxel(nx, ny, dt):
    grid = generate_scene(_small_params(5), SMALL)
    vel = (25.0 * nx / dt, 25.0 * ny / dt)
    back = advect(advect(grid, vel, dt), (-vel[0], -vel[1]), dt)
    err = np.abs(back.rho - grid.rho).sum() / grid.rho.sum()
    assert err <= 1e-3


def test_make_sequence_timestamps():
    grid = generate_scene(_small_params(6), SMALL)
    seq = make_sequence(grid, (5.0, 0.0), 4, spacing=5.0)
    assert len(seq) == 4
    np.testing.assert_array_equal(seq.times, [0.0, 5.0, 10.0, 15.0])
    assert np.array_equal(seq.grids[3].rho, np.roll(grid.rho, 3, axis=0))
