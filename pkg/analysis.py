import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import find_peaks

from model import (
    ConfigurationError,
    DecayFit,
    FieldSnapshot,
    FitError,
    Frame,
    Power,
    ProbeSeries,
    Record,
    SamplingError,
    SpacetimePoint,
    StabilityReport,
    WeightChoice,
    WeightedSup,
    as_power,
)
from solver_cart3d import probe_field

logger = logging.getLogger(__name__)

MIN_FIT_SAMPLES = 8


def _fit_window(times: np.ndarray, window: Optional[Tuple[float, float]]):
    if window is None:
        return np.ones(len(times), dtype=bool), float(times.min()), float(times.max())
    lo, hi = window
    if not lo < hi:
        raise FitError(f"fit window ({lo}, {hi}) is empty")
    return (times >= lo) & (times <= hi), float(lo), float(hi)


def fit_power_law(
    times,
    values,
    window: Optional[Tuple[float, float]] = None,
    probe: str = "",
    envelope: Optional[bool] = None,
    min_samples: int = MIN_FIT_SAMPLES,
) -> DecayFit:
    """Least squares fit of log|phi| = log A - k log t; k is reported as the decay rate.

    Zero samples are dropped and counted. When the series changes sign inside the
    window (or envelope=True) the fit runs on the local maxima of |phi|.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape:
        raise FitError(f"series has {len(times)} times but {len(values)} values")
    if len(times) == 0:
        raise FitError(f"no samples to fit for probe {probe or '?'}")
    inside, t_min, t_max = _fit_window(times, window)
    t, v = times[inside], values[inside]
    order = np.argsort(t)
    t, v = t[order], v[order]

    usable = np.isfinite(v) & (v != 0.0) & (t > 0.0)
    n_excluded = int(np.count_nonzero(~usable))
    t, v = t[usable], v[usable]
    mags = np.abs(v)

    if envelope is None:
        envelope = bool(np.any(np.sign(v[1:]) != np.sign(v[:-1]))) if len(v) > 1 else False
    if envelope:
        peaks, _ = find_peaks(mags)
        t, mags = t[peaks], mags[peaks]

    if len(t) < min_samples:
        raise FitError(
            f"probe {probe or '?'}: {len(t)} usable samples in [{t_min}, {t_max}], at least {min_samples} required"
        )
    log_t, log_v = np.log(t), np.log(mags)
    slope, intercept = np.polyfit(log_t, log_v, 1)
    residual = float(np.sqrt(np.mean((log_v - (slope * log_t + intercept)) ** 2)))
    fit = DecayFit(
        exponent=float(-slope),
        amplitude=float(math.exp(intercept)),
        residual=residual,
        t_min=t_min,
        t_max=t_max,
        n_samples=int(len(t)),
        n_excluded=n_excluded,
        envelope=bool(envelope),
        probe=probe,
    )
    logger.info(f"Fit {probe or 'series'}: exponent {fit.exponent:.4f} on [{t_min:g}, {t_max:g}] ({fit.n_samples} samples)")
    return fit


def fit_series(series: ProbeSeries, window: Optional[Tuple[float, float]] = None, abscissa: str = "t", **kwargs) -> DecayFit:
    """Fit a probe series against t, or against 1+t+|x| when abscissa="u"."""
    times = np.asarray(series.times, dtype=float)
    if abscissa == "u":
        times = 1.0 + times + np.asarray(series.radii, dtype=float)
    elif abscissa != "t":
        raise ConfigurationError(f"unknown abscissa {abscissa!r}")
    kwargs.setdefault("probe", series.label)
    return fit_power_law(times, series.values, window, **kwargs)


def lightcone_worldline(v0: float, u_window: Tuple[float, float], n_samples: int = 40) -> List[SpacetimePoint]:
    """Physical points on t - |x| = v0 with 1 + t + |x| geometrically spaced over 1 + u_window."""
    u_lo, u_hi = u_window
    if not (v0 <= u_lo < u_hi):
        raise ConfigurationError(f"light-cone window {u_window} must satisfy v0={v0} <= u_min < u_max")
    u = np.geomspace(1.0 + u_lo, 1.0 + u_hi, n_samples) - 1.0
    return [SpacetimePoint.on_axis(0.5 * (ui + v0), 0.5 * (ui - v0)) for ui in u]


def fit_lightcone_decay(
    snapshots: Sequence[FieldSnapshot],
    v0: float,
    u_window: Tuple[float, float],
    n_samples: int = 40,
    alpha: float = 0.5,
) -> DecayFit:
    """Decay of |phi| along the outgoing shell t - |x| = v0 against 1 + t + |x|."""
    if v0 < 1.0 - alpha:
        raise ConfigurationError(f"light-cone shell v0={v0} must satisfy v0 >= 1 - alpha = {1.0 - alpha}")
    if not snapshots:
        raise SamplingError("light-cone fit needs snapshots")
    compactified = snapshots[0].frame is Frame.COMPACTIFIED
    label = f"shell v0={v0:g}"
    series = probe_field(snapshots, lightcone_worldline(v0, u_window, n_samples), to_physical=compactified, label=label)
    return fit_series(series, (1.0 + u_window[0], 1.0 + u_window[1]), abscissa="u")


def _node_coordinates(snapshot: FieldSnapshot):
    """Per-node (radius, position getter) for radial and Cartesian grids."""
    if snapshot.is_radial:
        radii = snapshot.grid.radii()
        return radii, lambda idx: (float(radii[idx]), 0.0, 0.0)
    axis = snapshot.grid.axis()
    radii = np.sqrt(snapshot.grid.radius_squared())
    shape = radii.shape

    def position(flat):
        i, j, k = np.unravel_index(flat, shape)
        return float(axis[i]), float(axis[j]), float(axis[k])

    return radii, position


def _on_collar(mask: np.ndarray, flat: int) -> bool:
    """True when a node has a neighbour outside the mask or sits on the grid edge."""
    idx = np.unravel_index(flat, mask.shape)
    for axis in range(mask.ndim):
        for step in (-1, 1):
            j = list(idx)
            j[axis] += step
            if not 0 <= j[axis] < mask.shape[axis]:
                # the regular origin of a radial grid is not an edge
                if mask.ndim == 1 and j[axis] < 0:
                    continue
                return True
            if not mask[tuple(j)]:
                return True
    return False


def physical_weight(t, r, p: float, weight: WeightChoice):
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    if weight is WeightChoice.STRONG:
        return (1.0 + t + r) * (1.0 + t - r) ** (p - 2.0)
    if weight is WeightChoice.REGULARIZED:
        return (1.0 + t + r) * (1.0 + t - r)
    return t * t - r * r


def weighted_sup_constant(
    snapshots: Sequence[FieldSnapshot],
    p: Union[Power, float],
    weight: Union[WeightChoice, str] = WeightChoice.STRONG,
) -> WeightedSup:
    """sup over masked nodes and output times of |phi| times the chosen decay weight.

    Compactified snapshots are read in physical coordinates through the inverse
    map: t = -t~/s, |x| = |x~|/s, |phi| = s |psi| with s = t~^2 - |x~|^2. The
    reported location is physical; on_collar flags an argmax next to the mask edge.
    """
    p = as_power(p).p
    weight = WeightChoice(weight) if not isinstance(weight, WeightChoice) else weight
    best: Optional[WeightedSup] = None
    seen = 0
    for snap in snapshots:
        radii, position = _node_coordinates(snap)
        mask = np.asarray(snap.mask)
        if snap.frame is Frame.COMPACTIFIED:
            s = snap.time * snap.time - radii * radii
            mask = mask & (s > 0.0) & (snap.time < 0.0)
            s_safe = np.where(mask, s, 1.0)
            t_phys = -snap.time / s_safe
            r_phys = radii / s_safe
            mags = np.abs(snap.values) * s_safe
        else:
            t_phys = np.full(radii.shape, snap.time)
            r_phys = radii
            mags = np.abs(snap.values)
            mask = mask & (r_phys < t_phys)
        if not np.any(mask):
            continue
        seen += 1
        weighted = np.where(mask, mags * physical_weight(t_phys, np.where(mask, r_phys, 0.0), p, weight), -np.inf)
        flat = int(np.argmax(weighted))
        value = float(weighted.reshape(-1)[flat])
        if best is None or value > best.value:
            x = position(flat)
            scale = 1.0
            if snap.frame is Frame.COMPACTIFIED:
                scale = 1.0 / float(s_safe.reshape(-1)[flat])
            best = WeightedSup(
                value=value,
                weight=str(weight),
                t=float(t_phys.reshape(-1)[flat]),
                x=(x[0] * scale, x[1] * scale, x[2] * scale),
                on_collar=_on_collar(mask, flat),
            )
    if best is None:
        raise SamplingError("weighted sup needs at least one snapshot with a non-empty mask")
    if best.on_collar and best.value > 0.0:
        logger.warning(f"Weighted sup ({weight}) attained next to the mask edge at t={best.t:.4g}")
    logger.info(f"Weighted sup ({weight}): {best.value:.6g} over {seen} snapshots")
    return best


def weight_comparison_factor(alpha: float = 0.5) -> float:
    """Bound on (1+t+|x|)(1+t-|x|) / (t^2-|x|^2) in the future of the data disk."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha={alpha} must lie in (0, 1)")
    return 2.0 * (1.0 + 1.0 / (1.0 - alpha))


class WeightComparison(Record, frozen=True):
    regularized: float
    weak: float
    ratio: float
    factor: float
    consistent: bool


def compare_weights(snapshots: Sequence[FieldSnapshot], alpha: float = 0.5) -> WeightComparison:
    """The regularized constant lies between the weak one and factor times the weak one."""
    regularized = weighted_sup_constant(snapshots, 3.0, WeightChoice.REGULARIZED).value
    weak = weighted_sup_constant(snapshots, 3.0, WeightChoice.WEAK).value
    factor = weight_comparison_factor(alpha)
    if weak == 0.0:
        return WeightComparison(regularized=regularized, weak=weak, ratio=1.0, factor=factor, consistent=regularized == 0.0)
    ratio = regularized / weak
    consistent = 1.0 - 1e-12 <= ratio <= factor * (1.0 + 1e-12)
    return WeightComparison(regularized=regularized, weak=weak, ratio=ratio, factor=factor, consistent=consistent)


class BoundednessReport(Record, frozen=True):
    times: List[float]
    sups: List[float]
    running: List[float]
    window: Tuple[float, float]
    variation: float


def running_sup(snapshots: Sequence[FieldSnapshot], window: Optional[Tuple[float, float]] = None) -> BoundednessReport:
    """Running maximum of sup|psi| over masked nodes and its relative growth across the window."""
    ordered = sorted(snapshots, key=lambda s: s.time)
    times, sups = [], []
    for snap in ordered:
        if snap.valid_count == 0:
            continue
        times.append(snap.time)
        sups.append(float(np.max(np.abs(snap.values[snap.mask]))))
    if not times:
        raise SamplingError("running sup needs at least one snapshot with a non-empty mask")
    running = np.maximum.accumulate(np.asarray(sups)).tolist()
    if window is None:
        window = (times[0], times[-1])
    inside = [k for k, t in enumerate(times) if window[0] - 1e-12 <= t <= window[1] + 1e-12]
    if not inside:
        raise SamplingError(f"no snapshot inside the boundedness window {window}")
    first, last = running[inside[0]], running[inside[-1]]
    variation = (last - first) / last if last > 0.0 else 0.0
    logger.info(f"Running sup {last:.6g}, variation {variation:.3%} over t~ in [{window[0]:g}, {window[1]:g}]")
    return BoundednessReport(times=times, sups=sups, running=running, window=(float(window[0]), float(window[1])), variation=float(variation))


def stability_verdict(resolutions: Sequence[float], values: Sequence[float], threshold: float = 0.1) -> StabilityReport:
    """Successive relative changes; stable when the last one is below threshold."""
    if len(values) != len(resolutions) or len(values) < 2:
        raise ConfigurationError("stability needs at least two resolutions with one value each")
    changes = []
    for a, b in zip(values, values[1:]):
        if not (math.isfinite(a) and math.isfinite(b)):
            changes.append(math.inf)
        elif b == 0.0:
            changes.append(0.0 if a == 0.0 else math.inf)
        else:
            changes.append(abs(b - a) / abs(b))
    verdict = "stable" if changes[-1] < threshold else "unstable"
    return StabilityReport(
        resolutions=[float(r) for r in resolutions],
        values=[float(v) for v in values],
        changes=changes,
        threshold=float(threshold),
        verdict=verdict,
    )


def refinement_stability(extract: Callable[[float], float], resolutions: Sequence[float], threshold: float = 0.1) -> StabilityReport:
    """Evaluate extract at each resolution (coarse to fine) and judge the last relative change."""
    if len(resolutions) < 3:
        raise ConfigurationError(f"refinement stability needs at least 3 resolutions, got {len(resolutions)}")
    values = []
    for res in resolutions:
        value = float(extract(res))
        logger.debug(f"Refinement level {res}: {value:.10g}")
        values.append(value)
    report = stability_verdict(resolutions, values, threshold)
    if report.verdict != "stable":
        logger.warning(f"Quantity not refinement-stable: last change {report.changes[-1]:.3%} >= {threshold:.0%}")
    return report
