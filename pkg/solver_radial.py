import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from model import (
    ConfigurationError,
    ConvergenceOrder,
    Direction,
    FieldSnapshot,
    Frame,
    InitialDataSpec,
    Power,
    RadialGrid,
    SamplingError,
    SupportError,
    as_power,
)
from core import EventSampler, build_bump_data, defocusing_term, support_radius, w_to_phi
from conformal import clamped_coefficient, transform_field

logger = logging.getLogger(__name__)

# Smallest number of valid cone cells the compactified run keeps stepping with.
MIN_CONE_CELLS = 8


@dataclass
class RadialRun:
    """Outcome of a radial evolution."""

    frame: Frame
    grid: RadialGrid
    t0: float
    dt: float
    steps: int
    snapshots: List[FieldSnapshot] = field(default_factory=list)
    samplers: List[EventSampler] = field(default_factory=list)
    stop_reason: Optional[str] = None

    @property
    def final_time(self) -> float:
        return self.t0 + self.steps * self.dt

    def snapshot_at(self, time: float) -> FieldSnapshot:
        """Snapshot whose time is closest to the requested one."""
        if not self.snapshots:
            raise SamplingError("run produced no snapshots")
        return min(self.snapshots, key=lambda s: abs(s.time - time))


def step_count(span: float, h: float, cfl: float) -> int:
    if not 0.0 < cfl <= 1.0:
        raise ConfigurationError(f"cfl={cfl} violates the stability bound 0 < cfl <= 1")
    # Exact ratios such as 1/(0.5*0.01) must not round up to an extra step.
    return max(1, int(math.ceil(span / (cfl * h) - 1e-9)))


def output_steps(t0: float, dt: float, n_steps: int, times: Optional[Sequence[float]], every: Optional[int] = None) -> List[int]:
    steps = set()
    for t in times or ():
        steps.add(int(min(max(round((t - t0) / dt), 0), n_steps)))
    if every:
        steps.update(range(0, n_steps + 1, every))
        steps.add(n_steps)
    return sorted(steps)


def _evolve(
    frame: Frame,
    grid: RadialGrid,
    phi0: np.ndarray,
    phi1: np.ndarray,
    t0: float,
    dt: float,
    n_steps: int,
    power: float,
    coefficient: Callable[[float], Union[float, np.ndarray]],
    snapshot_steps: Sequence[int],
    samplers: Sequence[EventSampler],
    mask_at: Optional[Callable[[float], np.ndarray]] = None,
) -> RadialRun:
    """Leapfrog on w = r*phi: w'' = w_rr - r c |phi|^(p-1) phi, w(0) = w(r_max) = 0."""
    r = grid.radii()
    h2 = grid.h * grid.h
    dt2 = dt * dt
    r_in = r[1:-1]

    def acceleration(w: np.ndarray, t: float) -> np.ndarray:
        acc = np.zeros_like(w)
        acc[1:-1] = (w[2:] - 2.0 * w[1:-1] + w[:-2]) / h2
        c = coefficient(t)
        c_in = c if np.isscalar(c) else c[1:-1]
        acc[1:-1] -= r_in * c_in * defocusing_term(w[1:-1] / r_in, power)
        return acc

    full_mask = np.ones(grid.n_r, dtype=bool)

    def mask_for(t: float) -> np.ndarray:
        return full_mask if mask_at is None else mask_at(t)

    w_prev = r * phi0
    w_cur = w_prev + dt * r * phi1 + 0.5 * dt2 * acceleration(w_prev, t0)
    w_cur[0] = 0.0
    w_cur[-1] = 0.0

    run = RadialRun(frame=frame, grid=grid, t0=t0, dt=dt, steps=0, samplers=list(samplers))
    for sampler in samplers:
        sampler.schedule(t0, dt, n_steps)
    wanted = set(snapshot_steps)
    if 0 in wanted:
        run.snapshots.append(FieldSnapshot(frame, t0, grid, phi0, phi1, mask_for(t0)))

    phi_prev = phi0
    for n in range(1, n_steps + 1):
        t_n = t0 + n * dt
        next_mask = mask_for(t_n + dt)
        stopping = mask_at is not None and np.count_nonzero(next_mask) < MIN_CONE_CELLS
        phi_cur = w_to_phi(w_cur, r)
        due = [] if stopping else [s for s in samplers if len(s.due(n))]
        for sampler in due:
            sampler.take_before(n, grid, phi_prev, phi_cur, next_mask)

        w_next = 2.0 * w_cur - w_prev + dt2 * acceleration(w_cur, t_n)
        w_next[0] = 0.0
        w_next[-1] = 0.0

        if due or n in wanted or stopping:
            phi_next = w_to_phi(w_next, r)
            for sampler in due:
                sampler.take_after(n, grid, phi_next, t_n, dt, next_mask)
            if n in wanted or stopping:
                dphi = w_to_phi((w_next - w_prev) / (2.0 * dt), r)
                run.snapshots.append(FieldSnapshot(frame, t_n, grid, phi_cur, dphi, mask_for(t_n)))
                logger.debug(f"{frame} radial snapshot at t={t_n:.6g}")
        run.steps = n
        if stopping:
            run.stop_reason = f"validity cone shrank below {MIN_CONE_CELLS} cells after t={t_n:.6g}"
            break
        w_prev, w_cur = w_cur, w_next
        phi_prev = phi_cur

    logger.info(
        f"{frame} radial run: n_r={grid.n_r}, h={grid.h:.4g}, {run.steps} steps of dt={dt:.4g}, "
        f"final t={run.final_time:.6g}"
        + (f", stopped: {run.stop_reason}" if run.stop_reason else "")
    )
    return run


def evolve_physical_radial(
    data: FieldSnapshot,
    power: Union[Power, float],
    t_end: float,
    cfl: float = 0.5,
    output_times: Optional[Sequence[float]] = None,
    samplers: Sequence[EventSampler] = (),
    snapshot_every: Optional[int] = None,
    linear: bool = False,
) -> RadialRun:
    """Evolve radial physical data from its time to t_end with an exact Dirichlet boundary.

    linear drops the nonlinear term and evolves the free wave with the same stepping.
    """
    p = as_power(power).p
    if data.frame is not Frame.PHYSICAL or not data.is_radial:
        raise ConfigurationError("evolve_physical_radial needs radial data in the physical frame")
    grid = data.grid
    t0 = data.time
    if not t_end > t0:
        raise ConfigurationError(f"t_end={t_end} must exceed the data time {t0}")
    n_steps = step_count(t_end - t0, grid.h, cfl)
    dt = (t_end - t0) / n_steps
    reach = t_end + dt - t0 + support_radius(data)
    if grid.r_max < reach:
        raise ConfigurationError(
            f"grid.r_max={grid.r_max} < {reach:.6g}: the data support would reach the boundary before t_end"
        )
    steps = output_steps(t0, dt, n_steps, output_times if output_times is not None else [t_end], snapshot_every)
    return _evolve(
        Frame.PHYSICAL, grid, np.asarray(data.values), np.asarray(data.dvalues),
        t0, dt, n_steps, p, lambda t: 0.0 if linear else 1.0, steps, samplers,
    )


def compactified_mask(grid: RadialGrid, collar: int) -> Callable[[float], np.ndarray]:
    """Nodes at least collar cells inside the shrinking cone r~ < -t~."""
    r = grid.radii()
    margin = collar * grid.h

    def mask_at(t: float) -> np.ndarray:
        return r <= -t - margin

    return mask_at


def evolve_compactified_radial(
    data: FieldSnapshot,
    power: Union[Power, float],
    t_end: float,
    cfl: float = 0.5,
    output_times: Optional[Sequence[float]] = None,
    samplers: Sequence[EventSampler] = (),
    collar: int = 2,
    snapshot_every: Optional[int] = None,
) -> RadialRun:
    """Evolve psi from {t~ = -1} on the shrinking cone with coefficient max(t~^2 - r~^2, 0)^(p-3)."""
    p = as_power(power).require_decay_range().p
    if data.frame is not Frame.COMPACTIFIED or not data.is_radial:
        raise ConfigurationError("evolve_compactified_radial needs radial data in the compactified frame")
    grid = data.grid
    t0 = data.time
    if not t0 < t_end < 0.0:
        raise ConfigurationError(f"compactified t_end={t_end} must lie in ({t0}, 0)")
    reach = support_radius(data)
    if reach >= 1.0:
        raise SupportError(f"compactified data reaches r~={reach:.6g}, it must vanish for r~ >= 1")
    n_steps = step_count(t_end - t0, grid.h, cfl)
    dt = (t_end - t0) / n_steps
    if grid.r_max < 1.0 + (t_end + dt - t0):
        raise ConfigurationError(
            f"compactified grid.r_max={grid.r_max} is smaller than 1 + (t_end - t0) = {1.0 + t_end + dt - t0:.6g}"
        )
    r2 = grid.radii() ** 2
    steps = output_steps(t0, dt, n_steps, output_times if output_times is not None else [t_end], snapshot_every)
    return _evolve(
        Frame.COMPACTIFIED, grid, np.asarray(data.values), np.asarray(data.dvalues),
        t0, dt, n_steps, p, lambda t: clamped_coefficient(t, r2, p), steps, samplers,
        mask_at=compactified_mask(grid, collar),
    )


def compactified_grid(t_end: float, n_r: int, margin: float = 0.05) -> RadialGrid:
    """Grid on [0, 1 + (t_end + 1) + margin] for a run starting at t~ = -1."""
    return RadialGrid(1.0 + (t_end + 1.0) + margin, n_r)


def hyperboloid_time(r):
    """Physical time on the preimage of {t~ = -1}: t^2 - r^2 = t."""
    r = np.asarray(r, dtype=float)
    return 0.5 + np.sqrt(0.25 + r * r)


def hyperboloid_sampler(grid: RadialGrid, r_limit: Optional[float] = None) -> EventSampler:
    """Events on the hyperboloid above every node of a physical radial grid."""
    radii = grid.radii()
    if r_limit is not None:
        radii = radii[radii <= r_limit]
    return EventSampler(hyperboloid_time(radii), radii, label="hyperboloid", gradient=True)


def outgoing_weight(u, u_start: float):
    """Smoothstep from 0 at u_start to 1 at 2 u_start."""
    s = np.clip((np.asarray(u, dtype=float) - u_start) / u_start, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass
class Handoff:
    snapshot: FieldSnapshot
    r_cover: float
    rt_cover: float
    truncation_level: float


def hyperboloid_handoff(
    trace: EventSampler, grid: RadialGrid, tail_cells: int = 4, outgoing_after: Optional[float] = 2.0,
) -> Handoff:
    """Carry a physical solution sampled on t^2 - r^2 = t to (psi, dpsi/dt~) on {t~ = -1}.

    Compactified nodes whose preimage lies beyond the sampled part of the hyperboloid
    get zero data; the largest |psi| on the last covered nodes is reported as the
    truncation level.

    The chain rule for dpsi/dt~ carries phi_t + phi_r with a factor (1 - r~^2)^-3.
    Where the advanced time t + r = 1 / (1 - r~) of the hyperboloid exceeds
    outgoing_after, which must be at least 1 + the outer support radius, the free
    wave is purely outgoing and r~ psi depends on t~ - r~ alone, so dpsi/dt~ is
    blended into -(r~ psi)_r~ / r~, in full from twice that advanced time on.
    None keeps the chain rule everywhere.
    """
    order = np.argsort(trace.radii())
    radii = trace.radii()[order]
    good = trace.sampled[order]
    if not good[0]:
        raise ConfigurationError("the physical run never reached the hyperboloid vertex")
    last = len(good) if np.all(good) else int(np.argmin(good))
    radii = radii[:last]
    phi = trace.values[order][:last]
    phi_t = trace.dvalues[order][:last]
    phi_r = trace.gradients[order][:last]
    r_cover = float(radii[-1])
    t_cover = float(hyperboloid_time(r_cover))
    if t_cover < 1.25:
        raise ConfigurationError(
            f"physical run covers the hyperboloid only up to t={t_cover:.4g}; the handoff needs t >= 1.25"
        )

    rt = grid.radii()
    inside = rt < 1.0
    sigma = np.where(inside, 1.0 - rt * rt, 1.0)
    r_phys = np.where(inside, rt / sigma, np.inf)
    covered = inside & (r_phys <= r_cover)

    psi = np.zeros(grid.n_r)
    dpsi = np.zeros(grid.n_r)
    rc = r_phys[covered]
    f = np.interp(rc, radii, phi)
    f_t = np.interp(rc, radii, phi_t)
    f_r = np.interp(rc, radii, phi_r)
    points = np.column_stack([hyperboloid_time(rc), rc, np.zeros_like(rc), np.zeros_like(rc)])
    psi[covered], _ = transform_field(Direction.TO_COMPACTIFIED, f, points)
    s = sigma[covered]
    x = rt[covered]
    dpsi[covered] = (f_t * (1.0 + x * x) + 2.0 * x * f_r) / s ** 3 + 2.0 * f / s ** 2
    if outgoing_after is not None:
        weight = outgoing_weight(1.0 / (1.0 - x), outgoing_after)
        outgoing = -np.gradient(rt * psi, grid.h, edge_order=2)[covered] / np.where(x > 0.0, x, 1.0)
        dpsi[covered] = (1.0 - weight) * dpsi[covered] + weight * outgoing

    idx = np.nonzero(covered)[0]
    tail = idx[-tail_cells:] if len(idx) else idx
    truncation = float(np.max(np.abs(psi[tail]))) if len(tail) else 0.0
    rt_cover = float(rt[idx[-1]]) if len(idx) else 0.0
    peak = float(np.max(np.abs(psi))) if np.any(psi) else 0.0
    if truncation > 1e-8 * max(peak, 1e-300) and truncation > 0.0:
        logger.warning(
            f"Handoff truncated at r~={rt_cover:.6g} (r={r_cover:.6g}) with |psi|={truncation:.3e} "
            f"against peak {peak:.3e}; extend the physical run to shrink it"
        )
    snapshot = FieldSnapshot(Frame.COMPACTIFIED, -1.0, grid, psi, dpsi, inside)
    logger.info(f"Hyperboloid handoff: {len(idx)} nodes covered up to r~={rt_cover:.6g}, truncation {truncation:.3e}")
    return Handoff(snapshot=snapshot, r_cover=r_cover, rt_cover=rt_cover, truncation_level=truncation)


def order_of_convergence(run: Callable[[int], float], resolutions: Sequence[int]) -> ConvergenceOrder:
    """Self-convergence order from a probe value at resolutions in ratio 1:2:4(...)."""
    resolutions = [int(n) for n in resolutions]
    if len(resolutions) < 3:
        raise ConfigurationError("order_of_convergence needs at least three resolutions")
    for coarse, fine in zip(resolutions, resolutions[1:]):
        if fine != 2 * coarse:
            raise ConfigurationError(f"resolutions {resolutions} are not in ratio 1:2:4")
    values = [float(run(n)) for n in resolutions]
    diffs = [a - b for a, b in zip(values, values[1:])]
    ratios = []
    for d_coarse, d_fine in zip(diffs, diffs[1:]):
        ratios.append(abs(d_coarse) / abs(d_fine) if d_fine != 0.0 else None)

    if all(d == 0.0 for d in diffs):
        status, order = "degenerate", None
    elif any(r is None or r <= 1.0 for r in ratios):
        status, order = "indeterminate", None
        logger.warning(f"Non-monotone differences {diffs}; ratios {ratios}")
    else:
        status, order = "ok", math.log2(ratios[-1])
    return ConvergenceOrder(
        resolutions=[float(n) for n in resolutions],
        values=values,
        differences=diffs,
        ratios=ratios,
        order=order,
        status=status,
    )


@dataclass
class RadialProbeScenario:
    """phi(probe_t, probe_r) of a physical radial run, as a function of the cell count."""

    spec: InitialDataSpec
    power: float
    r_max: float
    probe_t: float
    probe_r: float
    cfl: float = 0.5
    min_cells_per_radius: float = 4.0

    def __call__(self, cells: int) -> float:
        grid = RadialGrid.from_cells(self.r_max, cells)
        data = build_bump_data(self.spec, grid, self.min_cells_per_radius)
        sampler = EventSampler([self.probe_t], [self.probe_r], label="probe")
        evolve_physical_radial(data, self.power, self.probe_t + 2.0 * grid.h, self.cfl, samplers=[sampler])
        if not sampler.sampled[0]:
            raise SamplingError(f"probe ({self.probe_t}, {self.probe_r}) was not sampled", location=(self.probe_t, self.probe_r))
        return float(sampler.values[0])
