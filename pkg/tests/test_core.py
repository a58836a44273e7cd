"""Tests for the core field primitives: null coordinates, the nonlinearity,
bump data, interpolation and event sampling."""
import numpy as np
import pytest

from model import (
    CartesianGrid3,
    ConfigurationError,
    DomainError,
    InitialDataSpec,
    NullCoords,
    Power,
    RadialGrid,
    SamplingError,
    SpacetimePoint,
)
from core import (
    EventSampler,
    build_bump_data,
    defocusing_term,
    from_null_coords,
    interpolate,
    null_coords,
    sample_field,
    support_radius,
    w_to_phi,
    worldline_sampler,
)


# ---------------------------------------------------------------------------
# Spacetime types
# ---------------------------------------------------------------------------


def test_null_coords_round_trip_single_point():
    nc = null_coords(SpacetimePoint.on_axis(3.0, 1.0))
    assert nc.u == pytest.approx(4.0)
    assert nc.v == pytest.approx(2.0)
    assert from_null_coords(nc) == pytest.approx((3.0, 1.0))


def test_null_coords_reject_u_below_v():
    with pytest.raises(DomainError):
        NullCoords(u=1.0, v=2.0)


@pytest.mark.parametrize("p", [2.0, 5.0, 1.5])
def test_power_outside_open_range(p):
    with pytest.raises(ConfigurationError):
        Power(p)


def test_power_decay_range():
    assert Power(3.0).require_decay_range().p == 3.0
    with pytest.raises(ConfigurationError, match="decay range"):
        Power(2.5).require_decay_range()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"support_radius": 0.6},
        {"support_radius": 0.0},
        {"phi0_power": 3},
        {"phi1_power": 2},
        {"center": (0.2, 0.0, 0.0)},
    ],
)
def test_initial_data_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        InitialDataSpec(**kwargs)


# ---------------------------------------------------------------------------
# Nonlinearity
# ---------------------------------------------------------------------------


def test_defocusing_term_integer_power():
    out = defocusing_term(np.array([-2.0, 0.5, 0.0]), 3)
    np.testing.assert_allclose(out, [-8.0, 0.125, 0.0])


def test_defocusing_term_fractional_power_is_odd():
    out = defocusing_term(np.array([4.0, -4.0]), 2.5)
    np.testing.assert_allclose(out, [32.0, -32.0])


# ---------------------------------------------------------------------------
# Bump data
# ---------------------------------------------------------------------------


def test_radial_bump_values(default_spec, small_radial_data):
    data = small_radial_data
    assert data.time == 1.0
    assert data.values[0] == pytest.approx(0.5 ** 8)
    assert data.dvalues[0] == pytest.approx(0.5 ** 6)
    assert np.all(data.mask)
    radii = data.grid.radii()
    assert np.all(data.values[radii >= 0.5] == 0.0)
    assert 0.46 < support_radius(data) <= 0.5 + 1e-12


def test_cartesian_bump_centre_value(default_spec):
    grid = CartesianGrid3(1.0, 21)
    data = build_bump_data(default_spec, grid)
    assert data.values.shape == (21, 21, 21)
    assert data.values[10, 10, 10] == pytest.approx(0.5 ** 8)
    assert data.values[0, 10, 10] == 0.0


def test_bump_data_too_coarse(default_spec):
    with pytest.raises(ConfigurationError, match="cells"):
        build_bump_data(default_spec, RadialGrid(10.0, 11))


def test_bump_data_off_centre_on_radial_grid():
    spec = InitialDataSpec(support_radius=0.4, center=(0.1, 0.0, 0.0))
    with pytest.raises(ConfigurationError, match="centred"):
        build_bump_data(spec, RadialGrid(4.0, 401))


def test_w_to_phi_recovers_origin_value():
    radii = np.linspace(0.0, 1.0, 11)
    phi = 2.0 + radii ** 2
    recovered = w_to_phi(radii * phi, radii)
    assert recovered[0] == pytest.approx(2.0)
    np.testing.assert_allclose(recovered[1:], phi[1:])


# ---------------------------------------------------------------------------
# Interpolation and sampling
# ---------------------------------------------------------------------------


def test_radial_interpolation_exact_for_linear_data():
    grid = RadialGrid(1.0, 11)
    array = 2.0 * grid.radii() + 1.0
    vals, ok = interpolate(grid, array, None, np.array([0.33, 0.95, 1.5]))
    assert vals[:2] == pytest.approx([1.66, 2.9])
    assert list(ok) == [True, True, False]


def test_interpolation_flags_masked_neighbour():
    grid = RadialGrid(1.0, 11)
    mask = np.ones(11, dtype=bool)
    mask[5] = False
    _, ok = interpolate(grid, np.zeros(11), mask, np.array([0.45, 0.25]))
    assert list(ok) == [False, True]


def test_trilinear_interpolation_exact_for_linear_data():
    grid = CartesianGrid3(1.0, 11)
    a = grid.axis()
    array = a[:, None, None] + 2.0 * a[None, :, None] - a[None, None, :]
    pos = np.array([[0.13, -0.41, 0.77]])
    vals, ok = interpolate(grid, array, None, pos)
    assert vals[0] == pytest.approx(0.13 - 0.82 - 0.77)
    assert ok[0]


def _quadratic_interpolation_error(grid, positions):
    if isinstance(grid, RadialGrid):
        array = grid.radii() ** 2
        exact = positions ** 2
    else:
        a = grid.axis()
        array = a[:, None, None] ** 2 + a[None, :, None] ** 2 + a[None, None, :] ** 2
        exact = np.sum(positions ** 2, axis=1)
    vals, ok = interpolate(grid, array, None, positions)
    assert np.all(ok)
    return float(np.max(np.abs(vals - exact)))


def test_interpolation_of_quadratic_data_is_second_order():
    rng = np.random.default_rng(11)
    radii = rng.uniform(0.0, 1.0, 2000)
    points = rng.uniform(-0.9, 0.9, (4000, 3))
    radial = [_quadratic_interpolation_error(RadialGrid(1.0, n), radii) for n in (41, 81)]
    box = [_quadratic_interpolation_error(CartesianGrid3(1.0, n), points) for n in (21, 41)]
    for coarse, fine in (radial, box):
        assert 3.5 <= coarse / fine <= 4.5


def test_sample_field_at_origin(small_radial_data):
    assert sample_field(small_radial_data, SpacetimePoint(1.0)) == pytest.approx(0.5 ** 8)


def test_sample_field_time_mismatch(small_radial_data):
    with pytest.raises(SamplingError, match="does not match"):
        sample_field(small_radial_data, SpacetimePoint(1.5))


def test_sample_field_outside_grid(small_radial_data):
    with pytest.raises(SamplingError):
        sample_field(small_radial_data, SpacetimePoint.on_axis(1.0, 9.0))


def test_event_sampler_requires_matching_lengths():
    with pytest.raises(ConfigurationError):
        EventSampler([1.0, 2.0], [0.0])


def test_unreached_events_become_exclusions():
    sampler = worldline_sampler([SpacetimePoint.on_axis(2.0, 0.5), SpacetimePoint.on_axis(3.0, 1.0)], label="probe")
    series = sampler.to_series()
    assert series.label == "probe"
    assert series.times == []
    assert [e.reason for e in series.excluded] == [EventSampler.NOT_REACHED] * 2
    assert series.excluded[1].x == (1.0, 0.0, 0.0)
