"""Tests for power-law fitting, weighted sup constants, boundedness and
refinement stability."""
import math

import numpy as np
import pytest

from model import (
    ConfigurationError,
    FieldSnapshot,
    FitError,
    Frame,
    ProbeSeries,
    RadialGrid,
    SamplingError,
    WeightChoice,
)
from analysis import (
    compare_weights,
    weight_comparison_factor,
    fit_lightcone_decay,
    fit_power_law,
    fit_series,
    lightcone_worldline,
    refinement_stability,
    running_sup,
    stability_verdict,
    weighted_sup_constant,
)


def _radial_snapshot(frame, time, value=1.0, n_r=101, r_max=1.0, mask=None):
    grid = RadialGrid(r_max, n_r)
    values = np.full(n_r, value)
    if mask is None:
        mask = np.ones(n_r, dtype=bool)
    return FieldSnapshot(frame, time, grid, values, np.zeros(n_r), mask)


# ---------------------------------------------------------------------------
# Power-law fits
# ---------------------------------------------------------------------------


def test_exact_power_law():
    t = np.geomspace(10.0, 100.0, 20)
    fit = fit_power_law(t, 7.0 * t ** -2.0, probe="x=0")
    assert fit.exponent == pytest.approx(2.0, abs=1e-10)
    assert fit.amplitude == pytest.approx(7.0, rel=1e-9)
    assert fit.residual < 1e-12
    assert fit.n_samples == 20
    assert fit.probe == "x=0"


def test_power_law_with_subleading_correction():
    t = np.geomspace(20.0, 200.0, 40)
    fit = fit_power_law(t, t ** -2.0 * (1.0 + 5.0 / t))
    assert 2.0 < fit.exponent < 2.15


def test_fit_is_invariant_under_rescaling():
    t = np.geomspace(10.0, 100.0, 20)
    values = t ** -1.5
    a = fit_power_law(t, values)
    b = fit_power_law(t, 1000.0 * values)
    assert b.exponent == pytest.approx(a.exponent, rel=1e-9)
    assert b.amplitude == pytest.approx(1000.0 * a.amplitude, rel=1e-9)


def test_zero_samples_are_excluded():
    t = np.geomspace(10.0, 100.0, 12)
    values = t ** -2.0
    values[[2, 5]] = 0.0
    fit = fit_power_law(t, values)
    assert fit.n_excluded == 2
    assert fit.n_samples == 10
    assert fit.exponent == pytest.approx(2.0)


def test_oscillating_series_uses_envelope():
    t = np.linspace(10.0, 200.0, 4000)
    fit = fit_power_law(t, np.cos(t) * t ** -2.0)
    assert fit.envelope
    assert fit.exponent == pytest.approx(2.0, abs=0.05)


def test_fit_window_selects_samples():
    t = np.geomspace(1.0, 1000.0, 60)
    values = np.where(t < 10.0, t ** -1.0, 10.0 * t ** -2.0)
    fit = fit_power_law(t, values, window=(20.0, 1000.0))
    assert fit.exponent == pytest.approx(2.0)
    assert (fit.t_min, fit.t_max) == (20.0, 1000.0)


@pytest.mark.parametrize(
    "times, window",
    [
        (np.geomspace(10.0, 100.0, 5), None),
        (np.geomspace(10.0, 100.0, 20), (5.0, 5.0)),
        (np.geomspace(10.0, 100.0, 20), (200.0, 300.0)),
        (np.array([]), None),
    ],
)
def test_fit_errors(times, window):
    with pytest.raises(FitError):
        fit_power_law(times, times ** -2.0 if len(times) else times, window=window)


def test_fit_series_against_null_coordinate():
    t = np.geomspace(10.0, 100.0, 20)
    r = t - 1.0
    series = ProbeSeries(label="shell", times=t.tolist(), radii=r.tolist(), values=((2.0 * t) ** -1.0).tolist())
    fit = fit_series(series, abscissa="u")
    assert fit.exponent == pytest.approx(1.0)
    assert fit.probe == "shell"
    with pytest.raises(ConfigurationError):
        fit_series(series, abscissa="v")


def test_lightcone_worldline():
    points = lightcone_worldline(1.0, (4.0, 30.0), 10)
    assert len(points) == 10
    assert (points[0].t, points[0].r) == pytest.approx((2.5, 1.5))
    assert all(pt.t - pt.r == pytest.approx(1.0) for pt in points)
    assert 1.0 + points[-1].t + points[-1].r == pytest.approx(31.0)
    with pytest.raises(ConfigurationError):
        lightcone_worldline(5.0, (4.0, 30.0))


def test_lightcone_shell_must_leave_the_data():
    with pytest.raises(ConfigurationError):
        fit_lightcone_decay([_radial_snapshot(Frame.PHYSICAL, 2.0)], 0.25, (4.0, 30.0))


# ---------------------------------------------------------------------------
# Weighted sup constants
# ---------------------------------------------------------------------------


def test_weighted_sup_on_physical_slice():
    snap = _radial_snapshot(Frame.PHYSICAL, 2.0, r_max=4.0)
    strong = weighted_sup_constant([snap], 3.0)
    assert strong.value == pytest.approx(9.0)
    assert strong.t == 2.0
    assert strong.x == (0.0, 0.0, 0.0)
    assert not strong.on_collar
    assert weighted_sup_constant([snap], 3.0, WeightChoice.WEAK).value == pytest.approx(4.0)
    assert weighted_sup_constant([snap], 3.0, "regularized").value == pytest.approx(9.0)


def test_weighted_sup_reads_compactified_slice_physically():
    mask = RadialGrid(1.0, 101).radii() < 0.4
    snap = _radial_snapshot(Frame.COMPACTIFIED, -0.5, mask=mask)
    # |phi| (t^2 - |x|^2) = |psi| for every node
    weak = weighted_sup_constant([snap], 3.0, WeightChoice.WEAK)
    assert weak.value == pytest.approx(1.0)
    regularized = weighted_sup_constant([snap], 3.0, WeightChoice.REGULARIZED)
    assert regularized.value == pytest.approx(2.25)
    assert regularized.t == pytest.approx(2.0)


def test_weighted_sup_needs_a_valid_node():
    snap = _radial_snapshot(Frame.PHYSICAL, 2.0, mask=np.zeros(101, dtype=bool))
    with pytest.raises(SamplingError):
        weighted_sup_constant([snap], 3.0)


def test_compare_weights_stays_within_factor():
    mask = RadialGrid(1.0, 101).radii() < 0.4
    comparison = compare_weights([_radial_snapshot(Frame.COMPACTIFIED, -0.5, mask=mask)])
    assert comparison.factor == pytest.approx(6.0)
    assert comparison.ratio == pytest.approx(2.25)
    assert comparison.consistent


def test_weight_comparison_factor_range():
    assert weight_comparison_factor(0.5) == pytest.approx(6.0)
    with pytest.raises(ConfigurationError):
        weight_comparison_factor(1.0)


# ---------------------------------------------------------------------------
# Boundedness and stability
# ---------------------------------------------------------------------------


def test_running_sup_variation_over_window():
    snaps = [
        _radial_snapshot(Frame.COMPACTIFIED, t, v)
        for t, v in [(-0.9, 1.0), (-0.8, 2.0), (-0.7, 1.5), (-0.6, 2.05)]
    ]
    report = running_sup(snaps, window=(-0.8, -0.6))
    assert report.running == pytest.approx([1.0, 2.0, 2.0, 2.05])
    assert report.variation == pytest.approx(0.05 / 2.05)
    with pytest.raises(SamplingError):
        running_sup(snaps, window=(-0.5, -0.4))


def test_stability_verdict():
    report = stability_verdict([0.1, 0.05, 0.025], [1.0, 1.2, 1.25])
    assert report.changes == pytest.approx([0.2 / 1.2, 0.05 / 1.25])
    assert report.verdict == "stable"
    assert stability_verdict([0.1, 0.05], [1.0, 2.0]).verdict == "unstable"
    assert stability_verdict([0.1, 0.05], [1.0, math.inf]).verdict == "unstable"
    with pytest.raises(ConfigurationError):
        stability_verdict([0.1], [1.0])


def test_refinement_stability():
    report = refinement_stability(lambda h: 1.0 + h * h, [0.1, 0.05, 0.025])
    assert report.verdict == "stable"
    assert report.values[-1] == pytest.approx(1.000625)
    with pytest.raises(ConfigurationError):
        refinement_stability(lambda h: 1.0, [0.1, 0.05])
