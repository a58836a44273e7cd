"""Tests for the retarded potential, the free Kirchhoff solution and the
decay-lemma and improvement checks built on them."""
import numpy as np
import pytest

from model import (
    ConfigurationError,
    DomainError,
    InitialDataSpec,
    QuadratureError,
    RadialGrid,
    SpacetimePoint,
    WeightChoice,
)
from core import build_bump_data, worldline_sampler
from solver_radial import evolve_physical_radial
from analysis import weighted_sup_constant
from duhamel import (
    PointwiseSource,
    TopHatSource,
    WeightFunction,
    decay_lemma_ratio,
    free_solution_kirchhoff,
    improved_bound_check,
    lemma_sample_points,
    retarded_potential,
    strong_weight,
)

TOPHAT_POINT = SpacetimePoint.on_axis(2.5, 0.75)
# (1/2r) int_{1.25}^{2} (1/4 - (3/4 - tau)^2)/2 ds with tau = 2.5 - s
TOPHAT_EXACT = 3.0 / 64.0


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------


def test_weight_function_support():
    w = WeightFunction(3.0, 3.0)
    assert w(2.0, 0.0) == pytest.approx(1.0 / 729.0)
    assert w(0.9, 0.0) == 0.0
    assert w(2.0, 1.6) == 0.0
    assert w.at(2.0, np.array([0.0, 0.0, 0.0])) == pytest.approx(1.0 / 729.0)


def test_weight_function_rejects_negative_exponent():
    with pytest.raises(ConfigurationError):
        WeightFunction(-1.0, 3.0)


def test_top_hat_source():
    source = TopHatSource()
    np.testing.assert_allclose(source(np.array([0.5, 1.5, 1.5, 2.5]), np.array([0.0, 0.4, 0.6, 0.0])), [0.0, 1.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Retarded potential
# ---------------------------------------------------------------------------


def test_top_hat_radial_reduction_matches_closed_form():
    result = retarded_potential(TopHatSource(), TOPHAT_POINT, method="radial")
    assert result.converged
    assert result.value == pytest.approx(TOPHAT_EXACT, rel=1e-3)


def test_top_hat_shell_quadrature_matches_closed_form():
    result = retarded_potential(TopHatSource(), TOPHAT_POINT, resolution=16, method="shell")
    assert result.value == pytest.approx(TOPHAT_EXACT, rel=0.02)


def test_pointwise_source_uses_shell_quadrature():
    source = PointwiseSource(lambda s, y: np.ones(np.shape(y)[:-1]), time_window=(1.0, 2.0))
    result = retarded_potential(source, SpacetimePoint(2.0), resolution=8)
    # (1/4 pi) int_{|y| < 1} 1/|y| dy = 1/2
    assert result.value == pytest.approx(0.5, rel=1e-3)


def test_retarded_potential_vanishes_at_initial_time():
    result = retarded_potential(WeightFunction(3.0, 3.0), SpacetimePoint(1.0))
    assert result.value == 0.0
    assert result.converged


def test_retarded_potential_before_initial_time():
    with pytest.raises(DomainError):
        retarded_potential(TopHatSource(), SpacetimePoint(0.5))


def test_retarded_potential_method_errors():
    with pytest.raises(QuadratureError):
        retarded_potential(TopHatSource(), TOPHAT_POINT, method="montecarlo")
    with pytest.raises(QuadratureError):
        retarded_potential(lambda s, y: np.ones(np.shape(y)[:-1]), TOPHAT_POINT, method="radial")


# ---------------------------------------------------------------------------
# Free solution
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("t", [1.6, 2.0, 5.0, 10.0])
def test_huygens_principle_at_the_origin(default_spec, t):
    assert free_solution_kirchhoff(default_spec, SpacetimePoint(t)) == 0.0


def test_kirchhoff_at_origin_closed_form(default_spec):
    # g0 + tau^2 g0'/rho + tau g1 at tau = 1/4
    assert free_solution_kirchhoff(default_spec, SpacetimePoint(1.25)) == pytest.approx(-0.0004119873046875, rel=1e-9)


def test_kirchhoff_is_continuous_off_the_axis(default_spec):
    on_axis = free_solution_kirchhoff(default_spec, SpacetimePoint(1.25))
    near = free_solution_kirchhoff(default_spec, SpacetimePoint.on_axis(1.25, 1e-4))
    assert near == pytest.approx(on_axis, rel=1e-3)


def test_kirchhoff_velocity_data_only():
    spec = InitialDataSpec(phi0_weight=0.0)
    # (1/2r) int_{0.2}^{0.5} s (1/4 - s^2)^3 ds = 0.21^4 / 8 / 1.6
    expected = 0.21 ** 4 / 8.0 / 1.6
    assert free_solution_kirchhoff(spec, SpacetimePoint.on_axis(2.0, 0.8)) == pytest.approx(expected, rel=1e-8)


def test_kirchhoff_needs_positive_elapsed_time(default_spec):
    with pytest.raises(DomainError):
        free_solution_kirchhoff(default_spec, SpacetimePoint(1.0))


# ---------------------------------------------------------------------------
# Decay lemma and improvement chain
# ---------------------------------------------------------------------------


def test_lemma_sample_points():
    points = lemma_sample_points([1.0, 2.0])
    assert [(pt.t, pt.r) for pt in points] == [(1.0, 0.0), (1.0, 1.0), (2.0, 0.0), (2.0, 1.0), (2.0, 1.0)]


def test_decay_lemma_ratio_is_stable_under_refinement():
    points = lemma_sample_points([1.0, 2.0, 5.0])
    coarse = decay_lemma_ratio(3.0, points, resolution=16)
    fine = decay_lemma_ratio(3.0, points, resolution=32)
    assert coarse.unconverged == 0
    assert np.isfinite(fine.max_ratio) and fine.max_ratio > 0.0
    assert abs(fine.max_ratio - coarse.max_ratio) / fine.max_ratio < 0.05
    assert fine.rows[0].ratio == 0.0


def test_decay_lemma_rejects_late_samples():
    with pytest.raises(DomainError):
        decay_lemma_ratio(3.0, [SpacetimePoint(150.0)])


def test_improved_bound_flags_violations(default_spec):
    pt = SpacetimePoint.on_axis(2.0, 0.5)
    report = improved_bound_check(1.0, 3.0, [(pt, 0.0), (pt, 10.0)], default_spec, resolution=16)
    assert [row.ok for row in report.rows] == [True, False]
    assert not report.passed
    assert report.violations == [pt]
    assert report.implied_constant == pytest.approx(10.0 * float(strong_weight(2.0, 0.5, 3.0)))
    assert float(strong_weight(2.0, 0.5, 3.0)) == pytest.approx(3.5 * 2.5)


def test_improved_bound_prefers_measured_free_wave(default_spec):
    pt = SpacetimePoint.on_axis(2.0, 0.9)
    kirchhoff = abs(free_solution_kirchhoff(default_spec, pt))
    measured = kirchhoff + 1e-3
    assert not improved_bound_check(0.0, 3.0, [(pt, measured)], default_spec, resolution=8).passed
    report = improved_bound_check(0.0, 3.0, [(pt, measured)], default_spec, resolution=8, free_values=[-measured])
    assert report.passed
    assert report.rows[0].chi == pytest.approx(measured)
    fallback = improved_bound_check(0.0, 3.0, [(pt, kirchhoff)], default_spec, resolution=8, free_values=[float("nan")])
    assert fallback.rows[0].chi == pytest.approx(kirchhoff)


def test_improved_bound_free_values_must_match_samples(default_spec):
    pt = SpacetimePoint.on_axis(2.0, 0.5)
    with pytest.raises(ConfigurationError, match="free_values"):
        improved_bound_check(1.0, 3.0, [(pt, 0.0)], default_spec, resolution=8, free_values=[0.0, 0.0])


@pytest.fixture(scope="module")
def shell_samples():
    """Nonlinear and free radial runs from A = 10 data, read on the outgoing shell at t = 12."""
    spec = InitialDataSpec(amplitude=10.0)
    grid = RadialGrid(14.0, 561)
    data = build_bump_data(spec, grid)
    run = evolve_physical_radial(data, 3.0, 12.0, 0.5, output_times=[12.0], snapshot_every=20)
    constant = weighted_sup_constant(run.snapshots, 3.0, WeightChoice.REGULARIZED).value
    last = run.snapshots[-1]
    radii = grid.radii()
    idx = np.nonzero((np.abs(radii - 11.0) <= 0.5) & (last.values != 0.0))[0][::3]
    samples = [(SpacetimePoint.on_axis(last.time, float(radii[i])), float(last.values[i])) for i in idx]
    free = worldline_sampler([pt for pt, _ in samples])
    evolve_physical_radial(data, 3.0, 12.0, 0.5, samplers=[free], linear=True)
    return spec, constant, samples, free.values.tolist()


def test_improvement_holds_on_the_outgoing_shell_against_the_measured_free_wave(shell_samples):
    spec, constant, samples, free = shell_samples
    assert len(samples) >= 8
    assert all(np.isfinite(free))
    report = improved_bound_check(constant, 3.0, samples, spec, resolution=16, free_values=free)
    assert report.passed, report.violations
    assert [row.chi for row in report.rows] == pytest.approx([abs(v) for v in free])


# ---------------------------------------------------------------------------
# Positivity and order of the retarded potential
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("pt", [SpacetimePoint.on_axis(2.0, 0.3), SpacetimePoint.on_axis(5.0, 3.0), SpacetimePoint(10.0)])
def test_retarded_potential_is_positive_and_ordered_by_source(pt):
    strong = retarded_potential(WeightFunction(3.0, 3.0), pt, resolution=16).value
    weaker = retarded_potential(WeightFunction(2.0, 3.0), pt, resolution=16).value
    wider = retarded_potential(WeightFunction(2.0, 3.0, alpha=0.8), pt, resolution=16).value
    assert 0.0 < strong <= weaker <= wider


def test_retarded_potential_of_top_hat_grows_with_the_time_slab():
    short = retarded_potential(TopHatSource(t_stop=1.5), TOPHAT_POINT, method="radial").value
    full = retarded_potential(TopHatSource(), TOPHAT_POINT, method="radial").value
    assert 0.0 < short <= full
