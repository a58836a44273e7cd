"""Tests for the 3D Cartesian leapfrog, the masked compactified box and probes."""
import numpy as np
import pytest

from config import Config
from model import (
    CartesianGrid3,
    ConfigurationError,
    FieldSnapshot,
    Frame,
    InitialDataSpec,
    RadialGrid,
    SpacetimePoint,
    SupportError,
)
from core import build_bump_data, interpolate, zero_snapshot
from diagnostics import energy_drift, total_energy
from solver_cart3d import (
    MAX_CFL_3D,
    embed_radial_data,
    evolve_compactified_3d,
    evolve_physical_3d,
    probe_field,
)
from solver_radial import evolve_physical_radial


def _constant_snapshot(frame, time, grid, value):
    shape = (grid.n_r,)
    return FieldSnapshot(frame, time, grid, np.full(shape, value), np.zeros(shape), np.ones(shape, dtype=bool))


# ---------------------------------------------------------------------------
# Physical box
# ---------------------------------------------------------------------------


def test_cfl_above_stability_bound(default_spec):
    data = build_bump_data(default_spec, CartesianGrid3(2.0, 41))
    with pytest.raises(ConfigurationError, match="stability"):
        evolve_physical_3d(data, 3.0, 1.5, cfl=MAX_CFL_3D + 0.01, workers=1)


def test_box_too_small_for_t_end(default_spec):
    data = build_bump_data(default_spec, CartesianGrid3(2.0, 41))
    with pytest.raises(ConfigurationError, match="half_width"):
        evolve_physical_3d(data, 3.0, 3.0, workers=1)


def test_box_agrees_with_radial_solver(default_spec):
    box = evolve_physical_3d(build_bump_data(default_spec, CartesianGrid3(2.0, 101)), 3.0, 1.5, workers=1)
    line = evolve_physical_radial(build_bump_data(default_spec, RadialGrid(2.0, 401)), 3.0, 1.5)
    snap, ref = box.snapshots[-1], line.snapshots[-1]
    assert snap.time == pytest.approx(ref.time)

    mid = snap.grid.n // 2
    x = snap.grid.axis()[mid:]
    along_axis = np.asarray(snap.values)[mid:, mid, mid]
    expected = np.interp(x, ref.grid.radii(), ref.values)
    peak = np.max(np.abs(expected))
    assert peak > 0.0
    assert np.max(np.abs(along_axis - expected)) <= 0.1 * peak


def test_worker_count_does_not_change_the_result(default_spec):
    data = build_bump_data(default_spec, CartesianGrid3(1.5, 41))
    serial = evolve_physical_3d(data, 3.0, 1.6, workers=1)
    threaded = evolve_physical_3d(data, 3.0, 1.6, workers=3)
    assert threaded.workers == 3
    assert np.array_equal(serial.snapshots[-1].values, threaded.snapshots[-1].values)


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.setenv("WAVELAB_WORKERS", "2")
    assert Config.workers() == 2
    monkeypatch.setenv("WAVELAB_WORKERS", "0")
    with pytest.raises(ConfigurationError):
        Config.workers()
    monkeypatch.setenv("WAVELAB_WORKERS", "many")
    with pytest.raises(ConfigurationError):
        Config.workers()


# ---------------------------------------------------------------------------
# Compactified box
# ---------------------------------------------------------------------------


def test_compactified_box_stops_before_cone_closes():
    data = zero_snapshot(Frame.COMPACTIFIED, -1.0, CartesianGrid3(2.0, 81))
    run = evolve_compactified_3d(data, 3.0, -0.05, workers=1)
    assert run.stop_reason is not None
    assert -0.55 < run.final_time <= -0.45
    assert not np.any(run.snapshots[-1].values)


def test_compactified_box_rejects_wide_support():
    grid = CartesianGrid3(2.0, 41)
    r = np.sqrt(grid.radius_squared())
    values = np.where(r < 0.99, 1.0, 0.0)
    data = FieldSnapshot(Frame.COMPACTIFIED, -1.0, grid, values, np.zeros_like(values), np.ones(values.shape, dtype=bool))
    with pytest.raises(SupportError):
        evolve_compactified_3d(data, 3.0, -0.5, workers=1)


def test_embed_radial_data_on_box():
    radial = build_bump_data(InitialDataSpec(), RadialGrid(2.0, 201))
    embedded = embed_radial_data(radial, CartesianGrid3(1.0, 21))
    assert embedded.values[10, 10, 10] == pytest.approx(0.5 ** 8)
    assert np.all(embedded.mask)


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------


def test_probe_interpolates_between_snapshots():
    grid = RadialGrid(2.0, 21)
    snaps = [_constant_snapshot(Frame.PHYSICAL, 1.0, grid, 1.0), _constant_snapshot(Frame.PHYSICAL, 2.0, grid, 3.0)]
    series = probe_field(snaps, [SpacetimePoint.on_axis(1.5, 0.5), SpacetimePoint.on_axis(3.0, 0.5)], label="axis")
    assert series.values == pytest.approx([2.0])
    assert len(series.excluded) == 1
    assert series.excluded[0].reason == "time outside the snapshot range"


def test_probe_maps_physical_worldline_into_compactified_snapshots():
    grid = RadialGrid(1.0, 101)
    snaps = [
        _constant_snapshot(Frame.COMPACTIFIED, -0.5, grid, 2.0),
        _constant_snapshot(Frame.COMPACTIFIED, -0.25, grid, 2.0),
    ]
    worldline = [SpacetimePoint(3.0), SpacetimePoint(1.5), SpacetimePoint.on_axis(1.0, 1.0)]
    series = probe_field(snaps, worldline, to_physical=True)
    # phi = Omega psi with Omega = 1/t^2 on the axis
    assert series.times == [3.0]
    assert series.values == pytest.approx([2.0 / 9.0])
    assert [e.index for e in series.excluded] == [1, 2]


def test_off_centre_data_keep_their_energy():
    spec = InitialDataSpec(amplitude=10.0, support_radius=0.35, center=(0.15, 0.0, 0.0))
    data = build_bump_data(spec, CartesianGrid3(2.0, 81))
    run = evolve_physical_3d(data, 3.0, 2.0, output_times=[1.0, 1.5, 2.0], workers=1)
    reports = [total_energy(s, 3.0) for s in run.snapshots]
    assert len(reports) == 3
    assert reports[0].total > 0.0
    assert energy_drift(reports) < 0.03
    last = np.asarray(run.snapshots[-1].values)
    assert not np.allclose(last, last[::-1, :, :])


def test_boundary_layer_stays_untouched(default_spec):
    grid = CartesianGrid3(3.0, 61)
    run = evolve_physical_3d(build_bump_data(default_spec, grid), 3.0, 1.6, output_times=np.linspace(1.1, 1.6, 6).tolist(), workers=1)
    assert len(run.snapshots) == 6
    for snap in run.snapshots:
        values = np.abs(np.asarray(snap.values))
        layer = np.ones(values.shape, dtype=bool)
        layer[2:-2, 2:-2, 2:-2] = False
        assert np.max(values[layer]) <= 1e-12
        assert np.max(values) > 0.0


def _symmetry_spread(n):
    grid = CartesianGrid3(1.2, n)
    snap = evolve_physical_3d(build_bump_data(InitialDataSpec(), grid), 3.0, 1.3, workers=1).snapshots[-1]
    directions = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [1, 1, 1]], dtype=float)
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    radii = np.linspace(0.0, 0.7, 15)
    samples = []
    for d in directions:
        vals, ok = interpolate(grid, np.asarray(snap.values), None, radii[:, None] * d[None, :])
        assert np.all(ok)
        samples.append(vals)
    samples = np.array(samples)
    return float(np.max(samples.max(axis=0) - samples.min(axis=0)))


def test_symmetric_data_lose_symmetry_at_second_order():
    coarse, fine = _symmetry_spread(49), _symmetry_spread(97)
    assert fine > 0.0
    assert coarse / fine >= 3.0
