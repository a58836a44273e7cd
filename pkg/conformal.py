import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from model import (
    ConeRegion,
    ConfigurationError,
    Direction,
    DomainError,
    FieldSnapshot,
    Frame,
    Power,
    RadialGrid,
    Record,
    SpacetimePoint,
    as_power,
)
from core import null_coords

logger = logging.getLogger(__name__)


class IdentityStudyRow(Record, frozen=True):
    h_step: float
    residual: float
    order: Optional[float] = None


class MapIdentityReport(Record, frozen=True):
    samples: int
    involution: float
    reciprocity: float
    radial_scaling: float
    null_u: float
    null_v: float

    @property
    def worst(self) -> float:
        return max(self.involution, self.reciprocity, self.radial_scaling, self.null_u, self.null_v)


class PullbackResidual(Record, frozen=True):
    jacobian: float
    metric: float


def in_region(pt: SpacetimePoint, region: ConeRegion) -> bool:
    r = pt.r
    if region is ConeRegion.T_PLUS:
        return r < pt.t
    if region is ConeRegion.T_MINUS:
        return r < -pt.t
    return r < -pt.t and -1.0 <= pt.t < 0.0


def classify_point(pt: SpacetimePoint) -> Optional[ConeRegion]:
    """Most specific cone region containing pt, or None off both cones."""
    if in_region(pt, ConeRegion.Q):
        return ConeRegion.Q
    if in_region(pt, ConeRegion.T_MINUS):
        return ConeRegion.T_MINUS
    if in_region(pt, ConeRegion.T_PLUS):
        return ConeRegion.T_PLUS
    return None


def phi_map_arrays(t, x):
    """Vectorised map (t, x) -> (-t, x)/(t^2 - |x|^2); x has a trailing axis of length 3."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    interval = t * t - np.sum(x * x, axis=-1)
    if np.any(interval <= 0.0):
        raise DomainError("conformal map needs t^2 > |x|^2 at every point")
    return -t / interval, x / interval[..., None]


def phi_map(pt: SpacetimePoint) -> SpacetimePoint:
    interval = pt.interval
    if interval <= 0.0:
        raise DomainError(f"point t={pt.t}, x={pt.x} lies on or outside the light cone")
    return SpacetimePoint(-pt.t / interval, tuple(c / interval for c in pt.x))


def conformal_factor(pt: SpacetimePoint) -> float:
    interval = pt.interval
    if interval <= 0.0:
        raise DomainError(f"conformal factor undefined at t={pt.t}, x={pt.x}")
    return 1.0 / interval


def coefficient_c(pt: SpacetimePoint, p: Union[Power, float], margin: float = 0.0) -> Tuple[float, float]:
    """(c, dc/dt) with c = (t^2 - |x|^2)^(p-3) at an interior point of the backward cone."""
    p = as_power(p).p
    if p < 3.0:
        raise ConfigurationError(f"coefficient c needs p >= 3, got p={p}")
    r = pt.r
    if not r < -pt.t - margin:
        raise DomainError(f"point t={pt.t}, |x|={r} is not inside T_minus with margin {margin}")
    interval = pt.interval
    if p == 3.0:
        return 1.0, 0.0
    return interval ** (p - 3.0), 2.0 * (p - 3.0) * pt.t * interval ** (p - 4.0)


def clamped_coefficient(t: float, r2, p: float):
    """max(t^2 - r^2, 0)^(p-3); totals the update rule outside the cone."""
    if p == 3.0:
        return 1.0
    base = np.maximum(t * t - np.asarray(r2, dtype=float), 0.0)
    if float(p).is_integer():
        return base ** int(p - 3)
    return base ** (p - 3.0)


def coefficient_dt(t, r2, p: float):
    """dc/dt = 2(p-3) t (t^2 - r^2)^(p-4) inside the cone, zero outside."""
    t = np.asarray(t, dtype=float)
    interval = t * t - np.asarray(r2, dtype=float)
    if p == 3.0:
        return np.zeros(np.broadcast(t, interval).shape)
    inside = interval > 0.0
    safe = np.where(inside, interval, 1.0)
    return np.where(inside, 2.0 * (p - 3.0) * t * safe ** (p - 4.0), 0.0)


def _snapshot_points(snapshot: FieldSnapshot):
    grid = snapshot.grid
    if isinstance(grid, RadialGrid):
        r = grid.radii()
        x = np.zeros((len(r), 3))
        x[:, 0] = r
    else:
        a = grid.axis()
        gx, gy, gz = np.meshgrid(a, a, a, indexing="ij")
        x = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    t = np.full(len(x), snapshot.time)
    return t, x


def transform_field(direction: Direction, values, points=None):
    """Carry field values between frames.

    physical->compactified: psi(Phi(pt)) = phi(pt) / Omega(pt).
    compactified->physical: phi(Phi(pt~)) = Omega(Phi(pt~)) psi(pt~).
    With Omega(Phi(q)) = 1/Omega(q) both reduce to multiplying by (t^2 - |x|^2)
    at the source point. points is an (n, 4) array of (t, x) in the source frame;
    a FieldSnapshot may be passed instead, in which case its masked nodes are used.
    Returns (transformed values, image points as (n, 4)).
    """
    if isinstance(values, FieldSnapshot):
        snapshot = values
        expected = Frame.PHYSICAL if direction is Direction.TO_COMPACTIFIED else Frame.COMPACTIFIED
        if snapshot.frame is not expected:
            raise ConfigurationError(f"{direction.value} needs a {expected} snapshot, got {snapshot.frame}")
        t, x = _snapshot_points(snapshot)
        keep = snapshot.mask.ravel()
        values = snapshot.values.ravel()[keep]
        t, x = t[keep], x[keep]
    else:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        values = np.asarray(values, dtype=float)
        t, x = pts[:, 0], pts[:, 1:4]
    t_img, x_img = phi_map_arrays(t, x)
    interval = t * t - np.sum(x * x, axis=-1)
    images = np.column_stack([t_img, x_img])
    return values * interval, images


HFunction = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _box(f: HFunction, q: np.ndarray, h_step: float) -> float:
    """Centred second-order -f_tt + Laplacian f at q = (t, x1, x2, x3)."""
    offsets = np.zeros((9, 4))
    for axis in range(4):
        offsets[1 + 2 * axis, axis] = h_step
        offsets[2 + 2 * axis, axis] = -h_step
    pts = q[None, :] + offsets
    vals = f(pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3])
    center = vals[0]
    second = [(vals[1 + 2 * a] - 2.0 * center + vals[2 + 2 * a]) / (h_step * h_step) for a in range(4)]
    return -second[0] + second[1] + second[2] + second[3]


def _check_margin(pt: SpacetimePoint, h_step: float) -> SpacetimePoint:
    margin = 4.0 * h_step
    if not pt.t - pt.r > margin:
        raise DomainError(f"point t={pt.t}, |x|={pt.r} is within {margin} of the forward cone")
    image = phi_map(pt)
    if not -image.t - image.r > margin:
        raise DomainError(f"image of t={pt.t}, |x|={pt.r} is within {margin} of the backward cone")
    return image


def conformal_identity_residual(h: HFunction, pt: SpacetimePoint, h_step: float = 1e-3) -> float:
    """|box(Omega * h o Phi) - Omega^3 (box h) o Phi| at pt, both sides by finite differences."""
    image = _check_margin(pt, h_step)

    def pulled(t, x1, x2, x3):
        x = np.stack([x1, x2, x3], axis=-1)
        t_img, x_img = phi_map_arrays(t, x)
        omega = 1.0 / (t * t - np.sum(x * x, axis=-1))
        return omega * h(t_img, x_img[:, 0], x_img[:, 1], x_img[:, 2])

    lhs = _box(pulled, pt.as_array(), h_step)
    omega = conformal_factor(pt)
    rhs = omega ** 3 * _box(h, image.as_array(), h_step)
    return abs(lhs - rhs)


def identity_order_study(h: HFunction, pt: SpacetimePoint, steps: Sequence[float] = (1e-2, 5e-3, 2.5e-3)) -> List[IdentityStudyRow]:
    rows = []
    prev = None
    for step in steps:
        residual = conformal_identity_residual(h, pt, step)
        order = None
        if prev is not None and residual > 0.0 and prev[1] > 0.0:
            order = math.log(prev[1] / residual) / math.log(prev[0] / step)
        rows.append(IdentityStudyRow(h_step=float(step), residual=float(residual), order=order))
        prev = (step, residual)
    logger.debug(f"Identity order study at t={pt.t}: {[(r.h_step, r.residual) for r in rows]}")
    return rows


def gaussian_test_function(t, x1, x2, x3):
    return np.exp(-(t * t + x1 * x1 + x2 * x2 + x3 * x3))


def _jacobian_fd(pt: SpacetimePoint, h_step: float) -> np.ndarray:
    q = pt.as_array()
    jac = np.zeros((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = h_step
        plus = phi_map(SpacetimePoint(q[0] + e[0], tuple(q[1:] + e[1:])))
        minus = phi_map(SpacetimePoint(q[0] - e[0], tuple(q[1:] - e[1:])))
        jac[:, j] = (plus.as_array() - minus.as_array()) / (2.0 * h_step)
    return jac


def jacobian_closed_form(pt: SpacetimePoint) -> np.ndarray:
    """Pullbacks of dt and dx^i through the map, as rows of the Jacobian."""
    omega = conformal_factor(pt)
    t = pt.t
    x = np.array(pt.x)
    jac = np.zeros((4, 4))
    jac[0, 0] = (2.0 * t * t * omega - 1.0) * omega
    jac[0, 1:] = -2.0 * t * x * omega ** 2
    jac[1:, 0] = -2.0 * t * x * omega ** 2
    jac[1:, 1:] = (np.eye(3) + 2.0 * np.outer(x, x) * omega) * omega
    return jac


def morawetz_pullback_check(pt: SpacetimePoint, h_step: float = 1e-4) -> float:
    """Max-norm deviation of the pushforward of (t^2+|x|^2, 2t x) from d/dt."""
    if not in_region(pt, ConeRegion.T_PLUS):
        raise DomainError(f"point t={pt.t}, x={pt.x} is not in T_plus")
    z = np.concatenate([[pt.t ** 2 + pt.r ** 2], 2.0 * pt.t * np.array(pt.x)])
    pushed = _jacobian_fd(pt, h_step) @ z
    return float(np.max(np.abs(pushed - np.array([1.0, 0.0, 0.0, 0.0]))))


def pullback_forms_residual(pt: SpacetimePoint, h_step: float = 1e-5) -> PullbackResidual:
    """Finite-difference Jacobian against the closed forms, and the conformal metric relation."""
    closed = jacobian_closed_form(pt)
    scale = max(1.0, float(np.max(np.abs(closed))))
    jac_dev = float(np.max(np.abs(_jacobian_fd(pt, h_step) - closed))) / scale
    eta = np.diag([-1.0, 1.0, 1.0, 1.0])
    omega = conformal_factor(pt)
    pulled = closed.T @ eta @ closed
    metric_dev = float(np.max(np.abs(pulled - omega ** 2 * eta))) / omega ** 2
    return PullbackResidual(jacobian=jac_dev, metric=metric_dev)


def random_forward_points(n: int, seed: int = 0, t_range=(1.1, 50.0), max_ratio: float = 0.95) -> np.ndarray:
    """(n, 4) points of T_plus with |x| < max_ratio * t."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(*t_range, size=n)
    r = t * max_ratio * rng.uniform(0.0, 1.0, size=n)
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1)[:, None]
    return np.column_stack([t, direction * r[:, None]])


def map_identity_report(n: int = 1000, seed: int = 0) -> MapIdentityReport:
    """Maximal relative errors of the algebraic identities of the map on random T_plus points."""
    pts = random_forward_points(n, seed)
    t, x = pts[:, 0], pts[:, 1:]
    t1, x1 = phi_map_arrays(t, x)
    t2, x2 = phi_map_arrays(t1, x1)
    scale = np.maximum(np.abs(t), np.linalg.norm(x, axis=1))
    involution = np.max(np.maximum(np.abs(t2 - t), np.linalg.norm(x2 - x, axis=1)) / scale)

    r = np.linalg.norm(x, axis=1)
    omega = 1.0 / (t * t - r * r)
    r1 = np.linalg.norm(x1, axis=1)
    omega_img = 1.0 / (t1 * t1 - r1 * r1)
    reciprocity = np.max(np.abs(omega * omega_img - 1.0))
    radial_scaling = np.max(np.abs(r1 - omega * r) / np.maximum(omega * r, 1e-300))

    null_u = []
    null_v = []
    for k in range(n):
        nc = null_coords(SpacetimePoint(float(t[k]), tuple(x[k])))
        nc_img = null_coords(SpacetimePoint(float(t1[k]), tuple(x1[k])))
        null_u.append(abs(nc_img.u + 1.0 / nc.u) / abs(1.0 / nc.u))
        null_v.append(abs(nc_img.v + 1.0 / nc.v) / abs(1.0 / nc.v))

    report = MapIdentityReport(
        samples=n,
        involution=float(involution),
        reciprocity=float(reciprocity),
        radial_scaling=float(radial_scaling),
        null_u=float(max(null_u)),
        null_v=float(max(null_v)),
    )
    logger.info(f"Map identities on {n} points: worst relative error {report.worst:.3e}")
    return report
