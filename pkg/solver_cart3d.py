import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from config import Config
from model import (
    CartesianGrid3,
    ConfigurationError,
    DomainError,
    FieldSnapshot,
    Frame,
    Power,
    ProbeExclusion,
    ProbeSeries,
    SamplingError,
    SpacetimePoint,
    SupportError,
    as_power,
)
from core import EventSampler, defocusing_term, interpolate, support_radius
from conformal import clamped_coefficient, phi_map
from solver_radial import MIN_CONE_CELLS, output_steps, step_count

logger = logging.getLogger(__name__)

# Leapfrog with the 7-point Laplacian is stable for dt/h <= 1/sqrt(3).
MAX_CFL_3D = 1.0 / math.sqrt(3.0)


@dataclass
class CartesianRun:
    frame: Frame
    grid: CartesianGrid3
    t0: float
    dt: float
    steps: int
    workers: int
    snapshots: List[FieldSnapshot] = field(default_factory=list)
    samplers: List[EventSampler] = field(default_factory=list)
    stop_reason: Optional[str] = None

    @property
    def final_time(self) -> float:
        return self.t0 + self.steps * self.dt


class SlabStencil:
    """In-place 7-point leapfrog update, split into slabs along the first axis.

    next = 2 cur - prev + (dt/h)^2 lap(cur) - dt^2 c F(cur) is written into prev.
    Every node is computed by the same expression whatever the slab layout, so
    results do not depend on the worker count.
    """

    def __init__(self, n: int, workers: int = 1):
        self.workers = max(1, int(workers))
        interior = np.arange(1, n - 1)
        self.slabs = [(int(s[0]), int(s[-1]) + 1) for s in np.array_split(interior, self.workers) if len(s)]

    def _update(self, bounds, prev, cur, lam, dt2, p, coef):
        a, b = bounds
        c = cur[a:b, 1:-1, 1:-1]
        lap = (
            cur[a + 1:b + 1, 1:-1, 1:-1] + cur[a - 1:b - 1, 1:-1, 1:-1]
            + cur[a:b, 2:, 1:-1] + cur[a:b, :-2, 1:-1]
            + cur[a:b, 1:-1, 2:] + cur[a:b, 1:-1, :-2]
            - 6.0 * c
        )
        nonlinear = defocusing_term(c, p)
        if not np.isscalar(coef):
            nonlinear *= coef[a:b, 1:-1, 1:-1]
        prev[a:b, 1:-1, 1:-1] = 2.0 * c - prev[a:b, 1:-1, 1:-1] + lam * lap - dt2 * nonlinear

    def step(self, prev, cur, lam, dt2, p, coef, pool: Optional[ThreadPoolExecutor] = None) -> None:
        if pool is None or len(self.slabs) == 1:
            for bounds in self.slabs:
                self._update(bounds, prev, cur, lam, dt2, p, coef)
            return
        futures = [pool.submit(self._update, bounds, prev, cur, lam, dt2, p, coef) for bounds in self.slabs]
        for fut in futures:
            fut.result()


def _laplacian(u: np.ndarray, h2: float) -> np.ndarray:
    lap = np.zeros_like(u)
    lap[1:-1, 1:-1, 1:-1] = (
        u[2:, 1:-1, 1:-1] + u[:-2, 1:-1, 1:-1]
        + u[1:-1, 2:, 1:-1] + u[1:-1, :-2, 1:-1]
        + u[1:-1, 1:-1, 2:] + u[1:-1, 1:-1, :-2]
        - 6.0 * u[1:-1, 1:-1, 1:-1]
    ) / h2
    return lap


def _zero_faces(u: np.ndarray) -> None:
    u[0], u[-1] = 0.0, 0.0
    u[:, 0], u[:, -1] = 0.0, 0.0
    u[:, :, 0], u[:, :, -1] = 0.0, 0.0


def _evolve(
    frame: Frame,
    grid: CartesianGrid3,
    phi0: np.ndarray,
    phi1: np.ndarray,
    t0: float,
    dt: float,
    n_steps: int,
    p: float,
    coefficient: Callable[[float], Union[float, np.ndarray]],
    snapshot_steps: Sequence[int],
    samplers: Sequence[EventSampler],
    workers: int,
    mask_at: Optional[Callable[[float], np.ndarray]] = None,
    cone_radius: Optional[Callable[[float], float]] = None,
) -> CartesianRun:
    h = grid.h
    lam = (dt / h) ** 2
    dt2 = dt * dt
    shape = phi0.shape
    full_mask = np.ones(shape, dtype=bool)

    def mask_for(t: float) -> np.ndarray:
        return full_mask if mask_at is None else mask_at(t)

    prev = np.array(phi0, dtype=float)
    _zero_faces(prev)
    c0 = coefficient(t0)
    cur = prev + dt * phi1 + 0.5 * dt2 * (_laplacian(prev, h * h) - c0 * defocusing_term(prev, p))
    _zero_faces(cur)

    run = CartesianRun(frame=frame, grid=grid, t0=t0, dt=dt, steps=0, workers=workers, samplers=list(samplers))
    for sampler in samplers:
        sampler.schedule(t0, dt, n_steps)
    wanted = set(snapshot_steps)
    if 0 in wanted:
        run.snapshots.append(FieldSnapshot(frame, t0, grid, phi0, phi1, mask_for(t0)))

    stencil = SlabStencil(grid.n, workers)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for n in range(1, n_steps + 1):
            t_n = t0 + n * dt
            stopping = cone_radius is not None and cone_radius(t_n + dt) < MIN_CONE_CELLS * h
            record = n in wanted or stopping
            due = [] if stopping else [s for s in samplers if len(s.due(n))]
            sample_mask = mask_for(t_n + dt) if due else None
            for sampler in due:
                sampler.take_before(n, grid, prev, cur, sample_mask)
            saved = prev.copy() if record else None

            stencil.step(prev, cur, lam, dt2, p, coefficient(t_n), pool)
            # prev now holds level n+1
            for sampler in due:
                sampler.take_after(n, grid, prev, t_n, dt, sample_mask)
            if record:
                dphi = (prev - saved) / (2.0 * dt)
                run.snapshots.append(FieldSnapshot(frame, t_n, grid, cur, dphi, mask_for(t_n)))
                logger.debug(f"{frame} 3D snapshot at t={t_n:.6g}")
                del saved
            run.steps = n
            if stopping:
                run.stop_reason = f"validity cone shrank below {MIN_CONE_CELLS} cells after t={t_n:.6g}"
                break
            prev, cur = cur, prev
    finally:
        if pool is not None:
            pool.shutdown()

    logger.info(
        f"{frame} 3D run: n={grid.n}, h={h:.4g}, workers={workers}, {run.steps} steps of dt={dt:.4g}, "
        f"final t={run.final_time:.6g}" + (f", stopped: {run.stop_reason}" if run.stop_reason else "")
    )
    return run


def _resolve_workers(workers: Optional[int]) -> int:
    if workers is None:
        return Config.workers()
    if workers < 1:
        raise ConfigurationError(f"workers={workers} must be >= 1")
    return int(workers)


def _check_cfl(cfl: float) -> None:
    if not 0.0 < cfl <= MAX_CFL_3D:
        raise ConfigurationError(f"cfl={cfl} violates the 3D stability bound 0 < cfl <= 1/sqrt(3)")


def evolve_physical_3d(
    data: FieldSnapshot,
    power: Union[Power, float],
    t_end: float,
    cfl: float = 0.25,
    output_times: Optional[Sequence[float]] = None,
    samplers: Sequence[EventSampler] = (),
    workers: Optional[int] = None,
    linear: bool = False,
) -> CartesianRun:
    """Leapfrog evolution in a box whose zero faces are never reached by the solution.

    linear drops the nonlinear term and evolves the free wave with the same stepping.
    """
    p = as_power(power).p
    if data.frame is not Frame.PHYSICAL or data.is_radial:
        raise ConfigurationError("evolve_physical_3d needs Cartesian data in the physical frame")
    _check_cfl(cfl)
    grid = data.grid
    t0 = data.time
    if not t_end > t0:
        raise ConfigurationError(f"t_end={t_end} must exceed the data time {t0}")
    n_steps = step_count(t_end - t0, grid.h, cfl)
    dt = (t_end - t0) / n_steps
    reach = t_end + dt - t0 + support_radius(data)
    if reach > grid.half_width - 2.0 * grid.h:
        raise ConfigurationError(
            f"t_end={t_end} is too large for half_width={grid.half_width}: the support would reach "
            f"{reach:.6g} > L - 2h = {grid.half_width - 2.0 * grid.h:.6g}"
        )
    steps = output_steps(t0, dt, n_steps, output_times if output_times is not None else [t_end])
    return _evolve(
        Frame.PHYSICAL, grid, np.asarray(data.values), np.asarray(data.dvalues), t0, dt, n_steps, p,
        lambda t: 0.0 if linear else 1.0, steps, samplers, _resolve_workers(workers),
    )


def evolve_compactified_3d(
    data: FieldSnapshot,
    power: Union[Power, float],
    t_end: float,
    cfl: float = 0.25,
    output_times: Optional[Sequence[float]] = None,
    samplers: Sequence[EventSampler] = (),
    collar: int = 2,
    workers: Optional[int] = None,
) -> CartesianRun:
    """Experimental masked evolution of psi on the shrinking cone |x~| < -t~."""
    p = as_power(power).require_decay_range().p
    if data.frame is not Frame.COMPACTIFIED or data.is_radial:
        raise ConfigurationError("evolve_compactified_3d needs Cartesian data in the compactified frame")
    _check_cfl(cfl)
    grid = data.grid
    t0 = data.time
    if not t0 < t_end < 0.0:
        raise ConfigurationError(f"compactified t_end={t_end} must lie in ({t0}, 0)")
    reach = support_radius(data)
    if reach > 1.0 - collar * grid.h:
        raise SupportError(
            f"compactified data reaches |x~|={reach:.6g}; it must vanish within {collar} cells of |x~| = 1"
        )
    n_steps = step_count(t_end - t0, grid.h, cfl)
    dt = (t_end - t0) / n_steps
    if 1.0 + (t_end + dt - t0) > grid.half_width:
        raise ConfigurationError(
            f"half_width={grid.half_width} is smaller than 1 + (t_end - t0) = {1.0 + t_end + dt - t0:.6g}"
        )
    r2 = grid.radius_squared()
    radius = np.sqrt(r2)
    margin = collar * grid.h

    def mask_at(t: float) -> np.ndarray:
        return radius <= -t - margin

    def cone_radius(t: float) -> float:
        return -t - margin

    steps = output_steps(t0, dt, n_steps, output_times if output_times is not None else [t_end])
    return _evolve(
        Frame.COMPACTIFIED, grid, np.asarray(data.values), np.asarray(data.dvalues), t0, dt, n_steps, p,
        lambda t: clamped_coefficient(t, r2, p), steps, samplers, _resolve_workers(workers),
        mask_at=mask_at, cone_radius=cone_radius,
    )


def embed_radial_data(snapshot: FieldSnapshot, grid: CartesianGrid3) -> FieldSnapshot:
    """Spread a radial snapshot onto a Cartesian grid by linear interpolation in |x|."""
    if not snapshot.is_radial:
        raise ConfigurationError("embed_radial_data needs a radial snapshot")
    radii = snapshot.grid.radii()
    r = np.sqrt(grid.radius_squared())
    values = np.interp(r, radii, snapshot.values, right=0.0)
    dvalues = np.interp(r, radii, snapshot.dvalues, right=0.0)
    valid = radii[snapshot.mask]
    mask = r <= (valid.max() if len(valid) else -1.0)
    return FieldSnapshot(snapshot.frame, snapshot.time, grid, values, dvalues, mask)


def cartesian_sampler(points: Sequence[SpacetimePoint], label: str = "") -> EventSampler:
    return EventSampler([pt.t for pt in points], [list(pt.x) for pt in points], label=label)


def _spatial_sample(snapshot: FieldSnapshot, x: np.ndarray):
    if snapshot.is_radial:
        vals, ok = interpolate(snapshot.grid, snapshot.values, snapshot.mask, np.atleast_1d(np.linalg.norm(x)))
    else:
        vals, ok = interpolate(snapshot.grid, snapshot.values, snapshot.mask, x[None, :])
    return float(vals[0]), bool(ok[0])


def probe_field(snapshots: Sequence[FieldSnapshot], worldline: Sequence[SpacetimePoint], to_physical: bool = False, label: str = "") -> ProbeSeries:
    """Sample stored snapshots along a worldline with linear interpolation in time.

    With to_physical the worldline is given in physical coordinates and the
    snapshots are compactified: each point is mapped, sampled, and multiplied by
    the conformal factor. Points that cannot be sampled are reported, not dropped.
    """
    ordered = sorted(snapshots, key=lambda s: s.time)
    if not ordered:
        raise SamplingError("probe_field needs at least one snapshot")
    times = np.array([s.time for s in ordered])
    slack = 1e-12 * max(1.0, float(np.max(np.abs(times))))
    out_t, out_r, out_v, excluded = [], [], [], []

    for k, pt in enumerate(worldline):
        target = pt
        factor = 1.0
        if to_physical:
            try:
                target = phi_map(pt)
            except DomainError as e:
                excluded.append(ProbeExclusion(index=k, t=pt.t, x=pt.x, reason=str(e)))
                continue
            factor = target.interval  # Omega at the physical point
        tau = target.t
        if tau < times[0] - slack or tau > times[-1] + slack:
            excluded.append(ProbeExclusion(index=k, t=pt.t, x=pt.x, reason="time outside the snapshot range"))
            continue
        j = int(np.clip(np.searchsorted(times, tau) - 1, 0, max(len(times) - 2, 0)))
        x = np.array(target.x, dtype=float)
        if len(ordered) == 1:
            value, ok = _spatial_sample(ordered[0], x)
        else:
            t_a, t_b = times[j], times[j + 1]
            v_a, ok_a = _spatial_sample(ordered[j], x)
            v_b, ok_b = _spatial_sample(ordered[j + 1], x)
            theta = min(max((tau - t_a) / (t_b - t_a), 0.0), 1.0)
            value = (1.0 - theta) * v_a + theta * v_b
            ok = (ok_a or theta == 1.0) and (ok_b or theta == 0.0)
        if not ok:
            excluded.append(ProbeExclusion(index=k, t=pt.t, x=pt.x, reason="outside the grid or the validity mask"))
            continue
        out_t.append(pt.t)
        out_r.append(pt.r)
        out_v.append(factor * value)

    if excluded:
        logger.warning(f"Probe {label or 'worldline'}: {len(excluded)} of {len(worldline)} points excluded")
    return ProbeSeries(label=label, times=out_t, radii=out_r, values=out_v, excluded=excluded)
