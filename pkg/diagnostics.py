import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from model import (
    DomainError,
    EnergyReport,
    FieldSnapshot,
    FluxReport,
    Frame,
    Power,
    SamplingError,
    SpacetimePoint,
    StokesBalance,
    SupportError,
    as_power,
)
from core import interpolate, radial_gradient
from conformal import ConeRegion, clamped_coefficient, coefficient_dt, in_region

logger = logging.getLogger(__name__)


def pseudo_energy_density(dt_psi, grad_psi, psi, c, p: Union[Power, float]):
    """e = 1/2 psi_t^2 + 1/2 |grad psi|^2 + c |psi|^(p+1)/(p+1).

    grad_psi is a scalar derivative or an array whose last axis holds the three
    components.
    """
    p = as_power(p).p
    c = np.asarray(c, dtype=float)
    if np.any(c < 0.0):
        raise DomainError("pseudo-energy density needs c >= 0")
    grad = np.asarray(grad_psi, dtype=float)
    grad2 = grad * grad if grad.ndim == 0 else np.sum(grad * grad, axis=-1)
    dt_psi = np.asarray(dt_psi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    e = 0.5 * dt_psi * dt_psi + 0.5 * grad2 + c * np.abs(psi) ** (p + 1.0) / (p + 1.0)
    return float(e) if np.ndim(e) == 0 else e


def _boundary_activity(snapshot: FieldSnapshot) -> bool:
    """Non-zero field on masked nodes that touch the mask edge or the grid edge."""
    mask = snapshot.mask
    active = (snapshot.values != 0.0) | (snapshot.dvalues != 0.0)
    edge = np.zeros_like(mask)
    if snapshot.is_radial:
        edge[-1] = True
        edge[:-1] |= ~mask[1:]
        edge[1:] |= ~mask[:-1]
    else:
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis], hi[axis] = 0, -1
            edge[tuple(lo)] = True
            edge[tuple(hi)] = True
            shifted = [slice(None)] * 3
            rest = [slice(None)] * 3
            shifted[axis], rest[axis] = slice(1, None), slice(None, -1)
            edge[tuple(rest)] |= ~mask[tuple(shifted)]
            edge[tuple(shifted)] |= ~mask[tuple(rest)]
    return bool(np.any(active & mask & edge))


def slice_energy(snapshot: FieldSnapshot, p: Union[Power, float], coefficient: Optional[Callable] = None) -> EnergyReport:
    """Midpoint-rule energy of one slice over masked points.

    coefficient maps squared radius to c; None means c = 1. Radial slices use shell
    midpoints with weight 4 pi r^2 h, Cartesian slices use node sums with forward
    differences for the gradient.
    """
    p = as_power(p).p
    grid = snapshot.grid
    h = grid.h
    phi = np.asarray(snapshot.values)
    dphi = np.asarray(snapshot.dvalues)
    mask = np.asarray(snapshot.mask)

    if snapshot.is_radial:
        r = grid.radii()
        valid = mask[:-1] & mask[1:]
        r_mid = r[:-1] + 0.5 * h
        weight = 4.0 * math.pi * r_mid * r_mid * h * valid
        phi_mid = 0.5 * (phi[:-1] + phi[1:])
        dphi_mid = 0.5 * (dphi[:-1] + dphi[1:])
        grad = (phi[1:] - phi[:-1]) / h
        c = 1.0 if coefficient is None else coefficient(r_mid * r_mid)
        kinetic = float(np.sum(weight * 0.5 * dphi_mid * dphi_mid))
        gradient = float(np.sum(weight * 0.5 * grad * grad))
        potential = float(np.sum(weight * c * np.abs(phi_mid) ** (p + 1.0))) / (p + 1.0)
    else:
        cell = h ** 3
        kinetic = 0.5 * cell * float(np.sum(np.where(mask, dphi * dphi, 0.0)))
        gradient = 0.0
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis], hi[axis] = slice(None, -1), slice(1, None)
            diff = (phi[tuple(hi)] - phi[tuple(lo)]) / h
            both = mask[tuple(hi)] & mask[tuple(lo)]
            gradient += 0.5 * cell * float(np.sum(np.where(both, diff * diff, 0.0)))
        c = 1.0 if coefficient is None else coefficient(grid.radius_squared())
        potential = cell * float(np.sum(np.where(mask, c * np.abs(phi) ** (p + 1.0), 0.0))) / (p + 1.0)

    warnings = []
    if _boundary_activity(snapshot):
        warnings.append(f"field support touches the mask boundary at t={snapshot.time:.6g}")
        logger.warning(warnings[-1])
    return EnergyReport(
        time=snapshot.time,
        kinetic=kinetic,
        gradient=gradient,
        potential=potential,
        total=kinetic + gradient + potential,
        frame=str(snapshot.frame),
        warnings=warnings,
    )


def total_energy(snapshot: FieldSnapshot, p: Union[Power, float]) -> EnergyReport:
    if snapshot.frame is not Frame.PHYSICAL:
        raise DomainError("total_energy expects a physical-frame snapshot")
    return slice_energy(snapshot, p)


def energy_drift(reports: Sequence[EnergyReport]) -> float:
    """Largest relative deviation of the total energy from its first value."""
    if not reports:
        return 0.0
    e0 = reports[0].total
    if e0 == 0.0:
        return 0.0 if all(r.total == 0.0 for r in reports) else math.inf
    return max(abs(r.total - e0) for r in reports) / e0


def _require_initial_slice(data: FieldSnapshot) -> None:
    if data.frame is not Frame.COMPACTIFIED or abs(data.time + 1.0) > 1e-9:
        raise DomainError("expected compactified data on the slice t~ = -1")


def e0_initial_energy(data: FieldSnapshot, p: Union[Power, float]) -> float:
    """Pseudo-energy of the data on {t~ = -1} over the unit disk, c = (1 - r~^2)^(p-3)."""
    _require_initial_slice(data)
    p = as_power(p).p
    r2 = data.grid.radii() ** 2 if data.is_radial else data.grid.radius_squared()
    outside = r2 >= 1.0
    if np.any(outside & ((data.values != 0.0) | (data.dvalues != 0.0))):
        raise SupportError("compactified data does not vanish outside the unit disk at t~ = -1")
    report = slice_energy(data, p, lambda rr: clamped_coefficient(-1.0, rr, p))
    return report.total


class SnapshotHistory:
    """Time-ordered compactified snapshots with cached spatial gradients."""

    def __init__(self, snapshots: Sequence[FieldSnapshot]):
        self.snapshots = sorted(snapshots, key=lambda s: s.time)
        if not self.snapshots:
            raise SamplingError("snapshot history is empty")
        if any(s.frame is not Frame.COMPACTIFIED for s in self.snapshots):
            raise DomainError("flux diagnostics need compactified snapshots")
        self.times = np.array([s.time for s in self.snapshots])
        self._gradients: Dict[int, object] = {}

    @property
    def resolution(self) -> float:
        return self.snapshots[0].grid.h

    def _gradient(self, k: int):
        if k not in self._gradients:
            snap = self.snapshots[k]
            if snap.is_radial:
                self._gradients[k] = radial_gradient(np.asarray(snap.values), snap.grid.h)
            else:
                self._gradients[k] = np.gradient(np.asarray(snap.values), snap.grid.h, edge_order=2)
        return self._gradients[k]

    def state(self, k: int, points: np.ndarray):
        """(psi, psi_t, grad psi, ok) at (n, 3) points of snapshot k."""
        snap = self.snapshots[k]
        grid = snap.grid
        if snap.is_radial:
            r = np.sqrt(np.sum(points * points, axis=1))
            psi, ok = interpolate(grid, np.asarray(snap.values), snap.mask, r)
            psi_t, _ = interpolate(grid, np.asarray(snap.dvalues), None, r)
            g, _ = interpolate(grid, self._gradient(k), None, r)
            safe = np.where(r > 0.0, r, 1.0)
            grad = np.where(r[:, None] > 0.0, points * (g / safe)[:, None], 0.0)
        else:
            psi, ok = interpolate(grid, np.asarray(snap.values), snap.mask, points)
            psi_t, _ = interpolate(grid, np.asarray(snap.dvalues), None, points)
            grad = np.column_stack([interpolate(grid, comp, None, points)[0] for comp in self._gradient(k)])
        return psi, psi_t, grad, ok


def as_history(snapshots) -> SnapshotHistory:
    return snapshots if isinstance(snapshots, SnapshotHistory) else SnapshotHistory(snapshots)


def sphere_nodes(n_theta: int, n_phi: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre in cos(theta) times uniform azimuth; weights sum to 4 pi."""
    n_phi = n_phi or 2 * n_theta
    mu, w_mu = np.polynomial.legendre.leggauss(n_theta)
    az = (np.arange(n_phi) + 0.5) * (2.0 * math.pi / n_phi)
    s = np.sqrt(1.0 - mu * mu)
    dirs = np.stack(
        [np.outer(s, np.cos(az)), np.outer(s, np.sin(az)), np.outer(mu, np.ones(n_phi))], axis=-1
    ).reshape(-1, 3)
    weights = np.outer(w_mu, np.full(n_phi, 2.0 * math.pi / n_phi)).ravel()
    return dirs, weights


def _check_apex(apex: SpacetimePoint, history: SnapshotHistory) -> None:
    if not in_region(apex, ConeRegion.Q):
        raise DomainError(f"apex t={apex.t}, x={apex.x} is not in Q")
    if abs(history.times[0] + 1.0) > 1e-9:
        raise SamplingError("snapshot history must start on the slice t~ = -1")
    if apex.t > history.times[-1] + 1e-12:
        raise SamplingError(f"apex time {apex.t} lies beyond the last snapshot {history.times[-1]}")


def _raise_invalid(apex, s, directions, ok):
    bad = int(np.argmin(ok))
    raise SamplingError(
        f"backward cone of apex t={apex.t}, x={apex.x} leaves the validity mask at s={s:.6g}, "
        f"direction {tuple(round(float(c), 6) for c in directions[bad])}",
        location=(s, tuple(directions[bad])),
    )


def mantle_flux(
    snapshots,
    apex: SpacetimePoint,
    p: Union[Power, float],
    e0: Optional[float] = None,
    n_theta: int = 16,
    n_phi: Optional[int] = None,
) -> FluxReport:
    """Flux of the pseudo-energy current through the backward null mantle of apex.

    Integrates 1/2 (psi_t - psi_n)^2 + 1/2 |grad psi - n psi_n|^2 + c|psi|^(p+1)/(p+1)
    with outward normal n and weight (t - s)^2 ds domega, trapezoidal in s over the
    snapshot times.
    """
    history = as_history(snapshots)
    p = as_power(p).p
    _check_apex(apex, history)
    dirs, weights = sphere_nodes(n_theta, n_phi)
    x_a = np.array(apex.x)

    s_nodes, integrand = [], []
    for k, s in enumerate(history.times):
        if s >= apex.t - 1e-12:
            break
        rho = apex.t - s
        y = x_a[None, :] + rho * dirs
        psi, psi_t, grad, ok = history.state(k, y)
        if not np.all(ok):
            _raise_invalid(apex, s, dirs, ok)
        psi_n = np.sum(grad * dirs, axis=1)
        tangential = grad - dirs * psi_n[:, None]
        c = clamped_coefficient(s, np.sum(y * y, axis=1), p)
        density = (
            0.5 * (psi_t - psi_n) ** 2
            + 0.5 * np.sum(tangential * tangential, axis=1)
            + c * np.abs(psi) ** (p + 1.0) / (p + 1.0)
        )
        s_nodes.append(s)
        integrand.append(rho * rho * float(np.dot(weights, density)))
    s_nodes.append(apex.t)
    integrand.append(0.0)
    flux = float(np.trapezoid(integrand, s_nodes))

    if e0 is None:
        e0 = e0_initial_energy(history.snapshots[0], p)
    logger.debug(f"Mantle flux at apex t={apex.t:.4g}, x={apex.x}: {flux:.6g} (E0={e0:.6g})")
    return FluxReport(
        apex=apex, flux=max(flux, 0.0), e0=float(e0), margin=float(e0) - flux, resolution=float(history.resolution),
    )


def ball_integral(history: SnapshotHistory, k: int, center, radius: float, integrand: Callable, n_theta: int = 16, n_rho: Optional[int] = None) -> float:
    """Integral over the ball of given radius in snapshot k; integrand(psi, psi_t, grad, y) -> array."""
    if radius <= 0.0:
        return 0.0
    n_rho = n_rho or max(16, int(math.ceil(radius / history.resolution)) + 1)
    xi, w_xi = np.polynomial.legendre.leggauss(n_rho)
    rho = 0.5 * radius * (xi + 1.0)
    w_rho = 0.5 * radius * w_xi * rho * rho
    dirs, weights = sphere_nodes(n_theta)
    center = np.asarray(center, dtype=float)
    total = 0.0
    for rk, wk in zip(rho, w_rho):
        y = center[None, :] + rk * dirs
        psi, psi_t, grad, ok = history.state(k, y)
        if not np.all(ok):
            raise SamplingError(f"ball of radius {radius:.6g} about {tuple(center)} leaves the validity mask")
        total += wk * float(np.dot(weights, integrand(psi, psi_t, grad, y)))
    return float(total)


def divergence_residual(snapshots, apex: SpacetimePoint, p: Union[Power, float], n_theta: int = 16) -> StokesBalance:
    """Discrete Stokes balance |bulk - (flux - disk energy)| on the solid backward cone of apex."""
    history = as_history(snapshots)
    p = as_power(p).p
    _check_apex(apex, history)
    x_a = np.array(apex.x)
    flux = mantle_flux(history, apex, p, e0=0.0, n_theta=n_theta).flux

    def energy(psi, psi_t, grad, y):
        c = clamped_coefficient(-1.0, np.sum(y * y, axis=1), p)
        return pseudo_energy_density(psi_t, grad, psi, c, p)

    disk = ball_integral(history, 0, x_a, 1.0 + apex.t, energy, n_theta)

    bulk = 0.0
    if p != 3.0:
        s_nodes, values = [], []
        for k, s in enumerate(history.times):
            if s >= apex.t - 1e-12:
                break

            def source(psi, psi_t, grad, y, s=s):
                return coefficient_dt(s, np.sum(y * y, axis=1), p) * np.abs(psi) ** (p + 1.0) / (p + 1.0)

            s_nodes.append(s)
            values.append(ball_integral(history, k, x_a, apex.t - s, source, n_theta))
        s_nodes.append(apex.t)
        values.append(0.0)
        bulk = float(np.trapezoid(values, s_nodes))

    residual = abs(bulk - (flux - disk))
    logger.debug(f"Stokes balance at apex t={apex.t:.4g}: bulk={bulk:.6g}, flux={flux:.6g}, disk={disk:.6g}")
    return StokesBalance(
        apex=apex, bulk=float(bulk), flux=float(flux), disk_energy=float(disk),
        residual=float(residual), resolution=float(history.resolution),
    )


def random_apexes(n: int, seed: int, margin: float, t_range: Tuple[float, float] = (-0.9, -0.2)) -> List[SpacetimePoint]:
    """Apexes in Q whose distance to the cone boundary is at least margin."""
    rng = np.random.default_rng(seed)
    apexes = []
    for _ in range(n):
        t = float(rng.uniform(*t_range))
        room = max(-t - margin, 0.0)
        r = room * float(rng.uniform()) ** (1.0 / 3.0)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        apexes.append(SpacetimePoint(t, tuple(float(c) for c in r * direction)))
    return apexes
