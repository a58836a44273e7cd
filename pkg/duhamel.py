import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate

from model import (
    ConfigurationError,
    DomainError,
    InitialDataSpec,
    Power,
    QuadratureError,
    QuadratureResult,
    Record,
    SpacetimePoint,
    as_power,
)

logger = logging.getLogger(__name__)

# Below this radius the radial reduction switches to its r -> 0 limit.
_AXIS_RADIUS = 1e-12


class WeightFunction:
    """(1+t+|x|)^(-a) (1+t-|x|)^(-b), active for t >= t0 inside |x| <= t - t0 + alpha."""

    radial = True

    def __init__(self, a: float, b: float, t0: float = 1.0, alpha: float = 0.5):
        if a < 0.0 or b < 0.0:
            raise ConfigurationError(f"weight exponents must be non-negative, got a={a}, b={b}")
        self.a = float(a)
        self.b = float(b)
        self.t0 = float(t0)
        self.alpha = float(alpha)

    def __repr__(self):
        return f"WeightFunction(a={self.a}, b={self.b}, t0={self.t0}, alpha={self.alpha})"

    @property
    def time_window(self) -> Tuple[float, float]:
        return self.t0, math.inf

    def support_radius(self, s):
        return np.asarray(s, dtype=float) - self.t0 + self.alpha

    def breakpoints(self, t: float, r: float) -> List[float]:
        edge = self.t0 - self.alpha
        return [0.5 * (t + r + edge), 0.5 * (t - r + edge)]

    def __call__(self, s, lam):
        s = np.asarray(s, dtype=float)
        lam = np.abs(np.asarray(lam, dtype=float))
        active = (s >= self.t0) & (lam <= s - self.t0 + self.alpha)
        plus = np.where(active, 1.0 + s + lam, 1.0)
        minus = np.where(active, 1.0 + s - lam, 1.0)
        return np.where(active, plus ** (-self.a) * minus ** (-self.b), 0.0)

    def at(self, s, y):
        return self(s, np.sqrt(np.sum(np.asarray(y) ** 2, axis=-1)))


class TopHatSource:
    """Constant value on t_start <= s <= t_stop, |y| <= radius."""

    radial = True

    def __init__(self, t_start: float = 1.0, t_stop: float = 2.0, radius: float = 0.5, value: float = 1.0):
        self.t_start = float(t_start)
        self.t_stop = float(t_stop)
        self.radius = float(radius)
        self.value = float(value)

    @property
    def time_window(self) -> Tuple[float, float]:
        return self.t_start, self.t_stop

    def support_radius(self, s):
        return np.full(np.shape(s), self.radius)

    def breakpoints(self, t: float, r: float) -> List[float]:
        return [t - (self.radius - r), t - r - self.radius, t - r + self.radius]

    def __call__(self, s, lam):
        s = np.asarray(s, dtype=float)
        lam = np.abs(np.asarray(lam, dtype=float))
        inside = (s >= self.t_start) & (s <= self.t_stop) & (lam <= self.radius)
        return np.where(inside, self.value, 0.0)

    def at(self, s, y):
        return self(s, np.sqrt(np.sum(np.asarray(y) ** 2, axis=-1)))


class PointwiseSource:
    """Wraps f(s, y) with y of shape (..., 3) for the shell quadrature."""

    radial = False

    def __init__(self, func: Callable, time_window: Tuple[float, float] = (1.0, math.inf)):
        self.func = func
        self.time_window = time_window

    def breakpoints(self, t: float, r: float) -> List[float]:
        return []

    def at(self, s, y):
        return self.func(s, y)


def _as_source(source):
    if hasattr(source, "at"):
        return source
    if callable(source):
        return PointwiseSource(source)
    raise QuadratureError(f"unsupported source {source!r}")


def _panels(lo: float, hi: float, cuts) -> List[float]:
    nodes = {lo, hi}
    nodes.update(c for c in cuts if lo < c < hi)
    return sorted(nodes)


def _radial_reduction(source, t: float, r: float, n: int) -> Tuple[float, int]:
    """Trapezoid rule for (1/(2r)) int ds int lambda f(s, lambda) dlambda over the characteristic triangle."""
    w_lo, w_hi = source.time_window
    s_lo, s_hi = max(1.0, w_lo), min(t, w_hi)
    if s_hi <= s_lo:
        return 0.0, 0
    cuts = list(source.breakpoints(t, r)) + [t - r]
    edges = _panels(s_lo, s_hi, cuts)
    total = 0.0
    evaluations = 0
    x = np.linspace(0.0, 1.0, n + 1)
    for a, b in zip(edges, edges[1:]):
        s = np.linspace(a, b, n + 1)
        tau = t - s
        if r <= _AXIS_RADIUS:
            inner = tau * source(s, tau)
            evaluations += len(s)
        else:
            lo = np.abs(r - tau)
            hi = np.minimum(r + tau, source.support_radius(s))
            width = np.maximum(hi - lo, 0.0)
            lam = lo[:, None] + width[:, None] * x[None, :]
            vals = lam * source(s[:, None], lam)
            inner = np.trapezoid(vals, x, axis=1) * width
            evaluations += vals.size
        total += float(np.trapezoid(inner, s))
    if r > _AXIS_RADIUS:
        total /= 2.0 * r
    return total, evaluations


def _shell_quadrature(source, t: float, x: np.ndarray, n: int) -> Tuple[float, int]:
    """Midpoint rule for (1/4 pi) int rho drho domega f(t - rho, x + rho omega)."""
    w_lo, w_hi = source.time_window
    s_lo, s_hi = max(1.0, w_lo), min(t, w_hi)
    if s_hi <= s_lo:
        return 0.0, 0
    r = float(np.linalg.norm(x))
    cuts = [t - c for c in source.breakpoints(t, r)] + [r]
    edges = _panels(t - s_hi, t - s_lo, cuts)
    n_mu, n_az = n, min(n, 128)
    mu = -1.0 + (np.arange(n_mu) + 0.5) * (2.0 / n_mu)
    az = (np.arange(n_az) + 0.5) * (2.0 * math.pi / n_az)
    sin = np.sqrt(1.0 - mu * mu)
    dirs = np.stack(
        [np.outer(sin, np.cos(az)), np.outer(sin, np.sin(az)), np.outer(mu, np.ones(n_az))], axis=-1
    ).reshape(-1, 3)
    w_dir = (2.0 / n_mu) * (2.0 * math.pi / n_az)
    total = 0.0
    evaluations = 0
    for a, b in zip(edges, edges[1:]):
        d_rho = (b - a) / n
        for rho in a + (np.arange(n) + 0.5) * d_rho:
            y = x[None, :] + rho * dirs
            vals = source.at(t - rho, y)
            total += rho * d_rho * w_dir * float(np.sum(vals))
            evaluations += len(dirs)
    return total / (4.0 * math.pi), evaluations


def retarded_potential(
    source,
    pt: SpacetimePoint,
    resolution: int = 32,
    tolerance: float = 1e-3,
    method: str = "auto",
    max_level: Optional[int] = None,
) -> QuadratureResult:
    """(1/4 pi) int_{B_{t-1}(x)} f(t - |y-x|, y) / |y-x| dy, refined by doubling until the change is below tolerance.

    Radial sources use the exact two-dimensional reduction; other sources (or
    method="shell") use the spherical-shell quadrature. The result is flagged
    unconverged when the last two refinements differ by more than 1%.
    """
    if pt.t < 1.0:
        raise DomainError(f"retarded potential needs t >= 1, got t={pt.t}")
    source = _as_source(source)
    if method == "auto":
        method = "radial" if getattr(source, "radial", False) else "shell"
    if method == "radial":
        if not getattr(source, "radial", False):
            raise QuadratureError("the radial reduction needs a radially symmetric source")
        r = pt.r

        def evaluate(n):
            return _radial_reduction(source, pt.t, r, n)

        max_level = 6 if max_level is None else max_level
    elif method == "shell":
        x = np.array(pt.x, dtype=float)

        def evaluate(n):
            return _shell_quadrature(source, pt.t, x, n)

        max_level = 3 if max_level is None else max_level
    else:
        raise QuadratureError(f"unknown quadrature method {method!r}")

    value, evaluations = evaluate(resolution)
    change = math.inf
    level = 0
    while level < max_level:
        level += 1
        refined, count = evaluate(resolution * 2 ** level)
        evaluations += count
        change = abs(refined - value) / abs(refined) if refined != 0.0 else abs(refined - value)
        value = refined
        if change <= tolerance:
            break
    if value == 0.0 and change == 0.0:
        change = 0.0
    converged = change <= 0.01
    if not converged:
        logger.warning(f"Retarded potential at t={pt.t}, |x|={pt.r:.4g} did not converge: last change {change:.3e}")
    return QuadratureResult(value=float(value), change=float(change), converged=converged, level=level, evaluations=evaluations)


def free_solution_kirchhoff(spec: InitialDataSpec, pt: SpacetimePoint) -> float:
    """Kirchhoff solution of the free wave equation with the bump data at t = 1.

    chi = M phi0 + tau M(omega . grad phi0) + tau M phi1 with spherical means M over
    the sphere of radius tau = t - 1 about x.
    """
    if not pt.t > 1.0:
        raise DomainError(f"Kirchhoff formula needs t > 1, got t={pt.t}")
    tau = pt.t - 1.0
    alpha = spec.support_radius
    alpha2 = alpha * alpha
    offset = np.array(pt.x) - np.array(spec.center)
    d = float(np.linalg.norm(offset))
    if abs(d - tau) >= alpha:
        return 0.0

    amp = spec.amplitude
    k0, k1 = spec.phi0_power, spec.phi1_power
    w0, w1 = spec.phi0_weight * amp, spec.phi1_weight * amp

    def g0(rho2):
        return w0 * max(alpha2 - rho2, 0.0) ** k0

    def g1(rho2):
        return w1 * max(alpha2 - rho2, 0.0) ** k1

    def q0(rho2):
        # g0'(rho) / rho
        return -2.0 * k0 * w0 * max(alpha2 - rho2, 0.0) ** (k0 - 1)

    if d == 0.0:
        rho2 = tau * tau
        return g0(rho2) + tau * tau * q0(rho2) + tau * g1(rho2)

    def integrand(mu):
        rho2 = d * d + tau * tau + 2.0 * d * tau * mu
        return g0(rho2) + tau * q0(rho2) * (d * mu + tau) + tau * g1(rho2)

    mu_max = min(1.0, (alpha2 - d * d - tau * tau) / (2.0 * d * tau))
    if mu_max <= -1.0:
        return 0.0
    value, _ = integrate.quad(integrand, -1.0, mu_max, epsabs=1e-15, epsrel=1e-12, limit=200)
    return 0.5 * value


def kirchhoff_decay_profile(spec: InitialDataSpec, times: Sequence[float], n_r: int = 64) -> List[float]:
    """sup over the outgoing shell of |chi(t, x)| * t for radial data, per time."""
    out = []
    for t in times:
        lo = max(t - 1.0 - spec.support_radius, 0.0)
        hi = t - 1.0 + spec.support_radius
        radii = np.linspace(lo, hi, n_r)
        peak = max(abs(free_solution_kirchhoff(spec, SpacetimePoint.on_axis(t, r))) for r in radii)
        out.append(peak * t)
    return out


class LemmaRow(Record, frozen=True):
    t: float
    r: float
    potential: float
    ratio: float
    converged: bool


class LemmaRatioTable(Record, frozen=True):
    p: float
    resolution: int
    max_ratio: float
    rows: List[LemmaRow]
    unconverged: int = 0


def lemma_sample_points(times: Sequence[float]) -> List[SpacetimePoint]:
    """Fixed x = 0, fixed x = e1, and the light-cone shell |x| = t - 1, per time."""
    points = []
    for t in times:
        points.append(SpacetimePoint(float(t)))
        points.append(SpacetimePoint.on_axis(t, 1.0))
        if t > 1.0:
            points.append(SpacetimePoint.on_axis(t, t - 1.0))
    return points


def strong_weight(t, r, p: float):
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    return (1.0 + t + r) * (1.0 + t - r) ** (p - 2.0)


def decay_lemma_ratio(
    p: Union[Power, float],
    samples: Sequence[SpacetimePoint],
    resolution: int = 32,
    tolerance: float = 1e-3,
    alpha: float = 0.5,
) -> LemmaRatioTable:
    """R = retarded_potential(weight(p, p)) * (1+t+|x|)(1+t-|x|)^(p-2) over the samples."""
    p = as_power(p).p
    weight = WeightFunction(p, p, alpha=alpha)
    rows = []
    for pt in samples:
        if not 1.0 <= pt.t <= 100.0:
            raise DomainError(f"lemma samples need t in [1, 100], got t={pt.t}")
        result = retarded_potential(weight, pt, resolution, tolerance)
        ratio = result.value * float(strong_weight(pt.t, pt.r, p))
        rows.append(LemmaRow(t=pt.t, r=pt.r, potential=result.value, ratio=ratio, converged=result.converged))
    unconverged = sum(1 for row in rows if not row.converged)
    table = LemmaRatioTable(
        p=p,
        resolution=int(resolution),
        max_ratio=max((row.ratio for row in rows), default=0.0),
        rows=rows,
        unconverged=unconverged,
    )
    logger.info(f"Decay lemma p={p}: max ratio {table.max_ratio:.6g} over {len(rows)} points ({unconverged} unconverged)")
    return table


class ImprovementRow(Record, frozen=True):
    t: float
    r: float
    measured: float
    duhamel: float
    chi: float
    bound: float
    ok: bool


class ImprovementReport(Record, frozen=True):
    p: float
    weak_constant: float
    rows: List[ImprovementRow]
    implied_constant: float
    bound_constant: float
    passed: bool
    violations: List[SpacetimePoint] = []


def improved_bound_check(
    weak_constant: float,
    p: Union[Power, float],
    samples: Sequence[Tuple[SpacetimePoint, float]],
    spec: InitialDataSpec,
    resolution: int = 32,
    tolerance: float = 1e-3,
    free_values: Optional[Sequence[float]] = None,
) -> ImprovementReport:
    """Check |phi| <= C^p * retarded_potential(weight(p, p)) + |chi| at measured samples.

    weak_constant bounds |phi| (1+t+|x|)(1+t-|x|) over the run. The implied constant
    of the main estimate is the largest measured |phi| times the strong weight.

    chi is the Kirchhoff solution unless free_values gives the free wave measured with
    the solver that produced the samples, one value per sample; non-finite entries
    fall back to Kirchhoff.
    """
    p = as_power(p).p
    weight = WeightFunction(p, p, alpha=spec.outer_radius)
    rows, violations = [], []
    if free_values is not None and len(free_values) != len(samples):
        raise ConfigurationError(f"free_values has {len(free_values)} entries for {len(samples)} samples")
    for k, (pt, measured) in enumerate(samples):
        measured = abs(float(measured))
        potential = retarded_potential(weight, pt, resolution, tolerance).value if pt.t > 1.0 else 0.0
        free = float(free_values[k]) if free_values is not None else math.nan
        if math.isfinite(free):
            chi = abs(free)
        else:
            chi = abs(free_solution_kirchhoff(spec, pt)) if pt.t > 1.0 else 0.0
        bound = weak_constant ** p * potential + chi
        ok = measured <= bound * (1.0 + 1e-9) + 1e-14
        if not ok:
            violations.append(pt)
            logger.error(f"Improvement chain violated at t={pt.t}, x={pt.x}: |phi|={measured:.6g} > {bound:.6g}")
        rows.append(ImprovementRow(t=pt.t, r=pt.r, measured=measured, duhamel=potential, chi=chi, bound=bound, ok=ok))
    implied = max((row.measured * float(strong_weight(row.t, row.r, p)) for row in rows), default=0.0)
    bound_constant = max((row.bound * float(strong_weight(row.t, row.r, p)) for row in rows), default=0.0)
    return ImprovementReport(
        p=p,
        weak_constant=float(weak_constant),
        rows=rows,
        implied_constant=implied,
        bound_constant=bound_constant,
        passed=not violations,
        violations=violations,
    )
