import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from model import (
    ConfigurationError,
    FieldSnapshot,
    Frame,
    InitialDataSpec,
    NullCoords,
    ProbeExclusion,
    ProbeSeries,
    RadialGrid,
    SamplingError,
    SpacetimePoint,
)

logger = logging.getLogger(__name__)

# Nodes touching the grid edge are accepted up to this fraction of a cell.
_EDGE_SLACK = 1e-9


def null_coords(pt: SpacetimePoint) -> NullCoords:
    r = pt.r
    return NullCoords(u=pt.t + r, v=pt.t - r)


def from_null_coords(nc: NullCoords) -> Tuple[float, float]:
    """Inverse of null_coords on the radial variable: returns (t, |x|)."""
    return 0.5 * (nc.u + nc.v), 0.5 * (nc.u - nc.v)


def defocusing_term(phi, p: float):
    """|phi|^(p-1) phi, by repeated multiplication when p is an integer."""
    phi = np.asarray(phi, dtype=float)
    if float(p).is_integer():
        k = int(p)
        out = phi.copy()
        a = np.abs(phi)
        for _ in range(k - 1):
            out = out * a
        return out
    return np.sign(phi) * np.abs(phi) ** p


def bump_profile(spec: InitialDataSpec, rho2, which: str = "phi0"):
    """Evaluate one component of the bump family at squared distance rho2 from the centre."""
    alpha2 = spec.support_radius ** 2
    if which == "phi0":
        k, weight = spec.phi0_power, spec.phi0_weight
    elif which == "phi1":
        k, weight = spec.phi1_power, spec.phi1_weight
    else:
        raise ValueError(f"unknown bump component {which!r}")
    base = np.maximum(alpha2 - np.asarray(rho2, dtype=float), 0.0)
    return spec.amplitude * weight * base ** k


def build_bump_data(spec: InitialDataSpec, grid, min_cells_per_radius: float = 4.0) -> FieldSnapshot:
    """Initial data (phi0, phi1) at t = 1 in the physical frame, mask all-true."""
    h = grid.h
    cells = spec.support_radius / h
    if cells < min_cells_per_radius:
        raise ConfigurationError(
            f"grid spacing h={h:.6g} resolves the support radius {spec.support_radius} "
            f"by {cells:.2f} cells, at least {min_cells_per_radius:g} are required"
        )

    if isinstance(grid, RadialGrid):
        if not spec.is_centered:
            raise ConfigurationError("a radial grid needs bump data centred at the origin")
        if grid.r_max < spec.support_radius:
            raise ConfigurationError(
                f"grid.r_max={grid.r_max} does not contain the data support {spec.support_radius}"
            )
        rho2 = grid.radii() ** 2
    else:
        if grid.half_width < spec.outer_radius:
            raise ConfigurationError(
                f"grid.half_width={grid.half_width} does not contain the data support"
            )
        axis = grid.axis()
        cx, cy, cz = spec.center
        rho2 = (
            ((axis - cx) ** 2)[:, None, None]
            + ((axis - cy) ** 2)[None, :, None]
            + ((axis - cz) ** 2)[None, None, :]
        )

    phi0 = bump_profile(spec, rho2, "phi0")
    phi1 = bump_profile(spec, rho2, "phi1")
    mask = np.ones(phi0.shape, dtype=bool)
    logger.debug(f"Built bump data on {type(grid).__name__} with h={h:.6g}, amplitude={spec.amplitude}")
    return FieldSnapshot(Frame.PHYSICAL, 1.0, grid, phi0, phi1, mask)


def zero_snapshot(frame: Frame, time: float, grid) -> FieldSnapshot:
    shape = (grid.n_r,) if isinstance(grid, RadialGrid) else (grid.n,) * 3
    return FieldSnapshot(frame, time, grid, np.zeros(shape), np.zeros(shape), np.ones(shape, dtype=bool))


def origin_value(w_over_r_interior: np.ndarray) -> float:
    """phi(0) from the parabola through the first three interior nodes."""
    f1, f2, f3 = w_over_r_interior[0], w_over_r_interior[1], w_over_r_interior[2]
    return 3.0 * f1 - 3.0 * f2 + f3


def w_to_phi(w: np.ndarray, radii: np.ndarray) -> np.ndarray:
    phi = np.empty_like(w)
    phi[1:] = w[1:] / radii[1:]
    phi[0] = origin_value(phi[1:4]) if len(w) > 3 else phi[1]
    return phi


def radial_gradient(values: np.ndarray, h: float) -> np.ndarray:
    """d/dr with second-order differences; zero at the origin by symmetry."""
    grad = np.gradient(values, h, edge_order=2)
    grad[0] = 0.0
    return grad


def interpolate(grid, array: np.ndarray, mask: Optional[np.ndarray], positions) -> Tuple[np.ndarray, np.ndarray]:
    """Linear (radial) or trilinear (3D) interpolation.

    positions are radii for a radial grid and (..., 3) coordinates for a Cartesian
    grid. Returns (values, ok); ok is False where the stencil leaves the grid or
    touches a masked-out node with non-zero weight.
    """
    if isinstance(grid, RadialGrid):
        r = np.abs(np.asarray(positions, dtype=float))
        s = r / grid.h
        inside = s <= (grid.n_r - 1) * (1.0 + _EDGE_SLACK)
        i = np.clip(np.floor(s).astype(int), 0, grid.n_r - 2)
        theta = np.clip(s - i, 0.0, 1.0)
        vals = (1.0 - theta) * array[i] + theta * array[i + 1]
        ok = inside
        if mask is not None:
            ok = ok & (mask[i] | (theta == 1.0)) & (mask[i + 1] | (theta == 0.0))
        return vals, ok

    pos = np.asarray(positions, dtype=float)
    n = grid.n
    s = (pos + grid.half_width) / grid.h
    inside = np.all((s >= -_EDGE_SLACK) & (s <= (n - 1) * (1.0 + _EDGE_SLACK)), axis=-1)
    idx = np.clip(np.floor(s).astype(int), 0, n - 2)
    frac = np.clip(s - idx, 0.0, 1.0)
    vals = np.zeros(pos.shape[:-1])
    ok = inside.copy()
    for dx in (0, 1):
        wx = frac[..., 0] if dx else 1.0 - frac[..., 0]
        for dy in (0, 1):
            wy = frac[..., 1] if dy else 1.0 - frac[..., 1]
            for dz in (0, 1):
                wz = frac[..., 2] if dz else 1.0 - frac[..., 2]
                w = wx * wy * wz
                ix, iy, iz = idx[..., 0] + dx, idx[..., 1] + dy, idx[..., 2] + dz
                vals = vals + w * array[ix, iy, iz]
                if mask is not None:
                    ok = ok & (mask[ix, iy, iz] | (w == 0.0))
    return vals, ok


def _positions(snapshot: FieldSnapshot, points: np.ndarray):
    pts = np.asarray(points, dtype=float)
    if snapshot.is_radial:
        return np.sqrt(np.sum(pts * pts, axis=-1)) if pts.ndim == 2 else pts
    return pts


def sample_field(snapshot: FieldSnapshot, pt: SpacetimePoint, component: str = "value") -> float:
    """Interpolate the snapshot field (or its time derivative) at pt."""
    scale = max(1.0, abs(snapshot.time))
    if abs(pt.t - snapshot.time) > 1e-12 * scale:
        raise SamplingError(
            f"point time {pt.t} does not match snapshot time {snapshot.time}", location=pt
        )
    array = snapshot.values if component == "value" else snapshot.dvalues
    pos = pt.r if snapshot.is_radial else np.array(pt.x)
    vals, ok = interpolate(snapshot.grid, array, snapshot.mask, np.atleast_1d(pos) if snapshot.is_radial else pos[None, :])
    if not bool(ok[0]):
        raise SamplingError(f"point t={pt.t}, x={pt.x} is outside the grid or masked out", location=pt)
    return float(vals[0])


def sample_points(snapshot: FieldSnapshot, points, component: str = "value"):
    """Vectorised spatial sampling at the snapshot time; returns (values, ok)."""
    array = snapshot.values if component == "value" else snapshot.dvalues
    return interpolate(snapshot.grid, array, snapshot.mask, _positions(snapshot, points))


def support_radius(snapshot: FieldSnapshot, tolerance: float = 0.0) -> float:
    """Largest distance from the origin at which the field or its derivative is non-zero."""
    active = (np.abs(snapshot.values) > tolerance) | (np.abs(snapshot.dvalues) > tolerance)
    if not np.any(active):
        return 0.0
    if snapshot.is_radial:
        return float(snapshot.grid.radii()[np.nonzero(active)[0].max()])
    r2 = snapshot.grid.radius_squared()
    return float(np.sqrt(r2[active].max()))


class EventSampler:
    """Records a running evolution at prescribed spacetime events.

    Each event (t, x) is attached to the step n whose time lies closest to t. The
    field is read at levels n-1, n, n+1 and interpolated quadratically in time and
    (tri)linearly in space; the time derivative comes from the same parabola. The
    radial gradient is available for radial grids.
    """

    NOT_REACHED = "not reached by the evolution"

    def __init__(self, times, positions, label: str = "", gradient: bool = False):
        self.label = label
        self.times = np.asarray(times, dtype=float).ravel()
        self.positions = np.asarray(positions, dtype=float)
        if self.positions.ndim == 1 and len(self.positions) != len(self.times):
            raise ConfigurationError("event sampler needs one position per event time")
        if self.positions.ndim == 2 and self.positions.shape != (len(self.times), 3):
            raise ConfigurationError("cartesian event positions must have shape (n, 3)")
        self.gradient = gradient
        n = len(self.times)
        self.values = np.full(n, np.nan)
        self.dvalues = np.full(n, np.nan)
        self.gradients = np.full(n, np.nan)
        self.reasons = [self.NOT_REACHED] * n
        self._centers = None
        self._pending = {}

    def radii(self) -> np.ndarray:
        if self.positions.ndim == 1:
            return np.abs(self.positions)
        return np.sqrt(np.sum(self.positions ** 2, axis=1))

    def schedule(self, t0: float, dt: float, last_center: int) -> None:
        """Bind events to steps; events centred beyond last_center stay unreached."""
        centers = np.rint((self.times - t0) / dt).astype(np.int64)
        centers = np.maximum(centers, 1)
        too_early = self.times < t0 - 1e-12
        centers[too_early | (centers > last_center)] = -1
        self._centers = centers

    def due(self, n: int) -> np.ndarray:
        if self._centers is None:
            return np.empty(0, dtype=int)
        return np.nonzero(self._centers == n)[0]

    def _spatial(self, grid, level: np.ndarray, mask, idx):
        pos = self.positions[idx]
        if isinstance(grid, RadialGrid):
            pos = np.abs(pos) if pos.ndim == 1 else np.sqrt(np.sum(pos ** 2, axis=1))
        return interpolate(grid, level, mask, pos)

    def take_before(self, n: int, grid, prev: np.ndarray, cur: np.ndarray, mask=None) -> None:
        idx = self.due(n)
        if len(idx) == 0:
            return
        v_prev, ok_prev = self._spatial(grid, prev, mask, idx)
        v_cur, ok_cur = self._spatial(grid, cur, mask, idx)
        entry = {"idx": idx, "v": [v_prev, v_cur], "ok": ok_prev & ok_cur}
        if self.gradient and isinstance(grid, RadialGrid):
            g_prev, _ = self._spatial(grid, radial_gradient(prev, grid.h), mask, idx)
            g_cur, _ = self._spatial(grid, radial_gradient(cur, grid.h), mask, idx)
            entry["g"] = [g_prev, g_cur]
        self._pending[n] = entry

    def take_after(self, n: int, grid, nxt: np.ndarray, t_n: float, dt: float, mask=None) -> None:
        entry = self._pending.pop(n, None)
        if entry is None:
            return
        idx = entry["idx"]
        v_next, ok_next = self._spatial(grid, nxt, mask, idx)
        v_prev, v_cur = entry["v"]
        s = (self.times[idx] - t_n) / dt
        first = 0.5 * (v_next - v_prev)
        second = v_next - 2.0 * v_cur + v_prev
        values = v_cur + s * first + 0.5 * s * s * second
        dvalues = (first + s * second) / dt
        ok = entry["ok"] & ok_next
        if "g" in entry:
            g_next, _ = self._spatial(grid, radial_gradient(nxt, grid.h), mask, idx)
            g_prev, g_cur = entry["g"]
            grads = g_cur + 0.5 * s * (g_next - g_prev) + 0.5 * s * s * (g_next - 2.0 * g_cur + g_prev)
            self.gradients[idx] = np.where(ok, grads, np.nan)
        self.values[idx] = np.where(ok, values, np.nan)
        self.dvalues[idx] = np.where(ok, dvalues, np.nan)
        for j, good in zip(idx, ok):
            self.reasons[j] = "" if good else "outside the grid or the validity mask"

    @property
    def sampled(self) -> np.ndarray:
        return np.array([reason == "" for reason in self.reasons], dtype=bool)

    def to_series(self) -> ProbeSeries:
        """Sampled events as a ProbeSeries; the rest become exclusion records."""
        good = self.sampled
        radii = self.radii()
        excluded = []
        for j in np.nonzero(~good)[0]:
            x = tuple(float(c) for c in self.positions[j]) if self.positions.ndim == 2 else (float(radii[j]), 0.0, 0.0)
            excluded.append(ProbeExclusion(index=int(j), t=float(self.times[j]), x=x, reason=self.reasons[j]))
        return ProbeSeries(
            label=self.label,
            times=self.times[good].tolist(),
            radii=radii[good].tolist(),
            values=self.values[good].tolist(),
            excluded=excluded,
        )


def worldline_sampler(points: Sequence[SpacetimePoint], label: str = "", radial: bool = True, gradient: bool = False) -> EventSampler:
    times = [pt.t for pt in points]
    if radial:
        positions = [pt.r for pt in points]
    else:
        positions = [list(pt.x) for pt in points]
    return EventSampler(times, positions, label=label, gradient=gradient)
