import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import msgspec
import numpy as np


# Exceptions
class LabError(Exception):
    """Base exception for every failure raised by the laboratory."""
    pass


class ConfigurationError(LabError):
    """Invalid scenario, grid or solver configuration."""
    pass


class DomainError(LabError):
    """A point lies outside the region an operation is defined on."""
    pass


class SamplingError(LabError):
    """Interpolation requested outside the grid or the validity mask."""

    def __init__(self, message: str, location=None):
        super().__init__(message)
        self.location = location


class FitError(LabError):
    """Too few usable samples for a decay fit."""
    pass


class QuadratureError(LabError):
    """Quadrature could not be carried out on the requested input."""
    pass


class SupportError(LabError):
    """Data support escapes the region required by the setup."""
    pass


class AcceptanceError(LabError):
    """One or more acceptance checks failed."""
    pass


# Enum definitions
class Frame(enum.Enum):
    PHYSICAL = "physical"
    COMPACTIFIED = "compactified"

    def __str__(self):
        return self.value


class ConeRegion(enum.Enum):
    T_PLUS = "T_plus"
    T_MINUS = "T_minus"
    Q = "Q"

    def __str__(self):
        return self.value


class Direction(enum.Enum):
    TO_COMPACTIFIED = "physical->compactified"
    TO_PHYSICAL = "compactified->physical"


class WeightChoice(enum.Enum):
    STRONG = "strong"
    WEAK = "weak"
    REGULARIZED = "regularized"

    def __str__(self):
        return self.value


class Record(msgspec.Struct, frozen=True):
    """Base for plain-value records that end up in JSON artifacts."""

    def as_dict(self):
        return msgspec.to_builtins(self)


# Spacetime types
class Power(Record, frozen=True):
    p: float

    def __post_init__(self):
        if not (2.0 < self.p < 5.0):
            raise ConfigurationError(f"power p={self.p} must satisfy 2 < p < 5")

    @property
    def is_integer(self) -> bool:
        return float(self.p).is_integer()

    def require_decay_range(self) -> "Power":
        """Raise unless 3 <= p < 5, the range of the end-to-end decay statements."""
        if not (3.0 <= self.p < 5.0):
            raise ConfigurationError(
                f"power p={self.p} is outside the decay range 3 <= p < 5"
            )
        return self


def as_power(p: Union["Power", float, int]) -> Power:
    return p if isinstance(p, Power) else Power(float(p))


class SpacetimePoint(Record, frozen=True):
    t: float
    x: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def on_axis(cls, t: float, r: float) -> "SpacetimePoint":
        return cls(float(t), (float(r), 0.0, 0.0))

    @property
    def r(self) -> float:
        return math.sqrt(self.x[0] ** 2 + self.x[1] ** 2 + self.x[2] ** 2)

    @property
    def interval(self) -> float:
        """t^2 - |x|^2, positive inside both light cones."""
        return self.t * self.t - (self.x[0] ** 2 + self.x[1] ** 2 + self.x[2] ** 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.t, self.x[0], self.x[1], self.x[2]], dtype=float)


class NullCoords(Record, frozen=True):
    u: float
    v: float

    def __post_init__(self):
        if self.u < self.v:
            raise DomainError(f"null coordinates need u >= v, got u={self.u}, v={self.v}")


class InitialDataSpec(Record, frozen=True):
    """Polynomial bump family A*(alpha^2 - |x-c|^2)^k, C^(k-1) at the support edge."""

    amplitude: float = 1.0
    support_radius: float = 0.5
    phi0_power: int = 4
    phi1_power: int = 3
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    phi0_weight: float = 1.0
    phi1_weight: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.support_radius <= 0.5):
            raise ConfigurationError(
                f"data.support_radius={self.support_radius} must satisfy 0 < alpha <= 1/2"
            )
        if self.phi0_power < 4:
            raise ConfigurationError(f"data.phi0_power={self.phi0_power} must be >= 4 (phi0 in C^3)")
        if self.phi1_power < 3:
            raise ConfigurationError(f"data.phi1_power={self.phi1_power} must be >= 3 (phi1 in C^2)")
        if self.outer_radius > 0.5 + 1e-12:
            raise ConfigurationError(
                f"data.center offset {self.center_offset:.6g} plus support radius "
                f"{self.support_radius} exceeds 1/2"
            )

    @property
    def center_offset(self) -> float:
        return math.sqrt(sum(c * c for c in self.center))

    @property
    def outer_radius(self) -> float:
        """Radius about the origin that contains the support."""
        return self.center_offset + self.support_radius

    @property
    def is_centered(self) -> bool:
        return self.center_offset == 0.0


# Grids
class RadialGrid(Record, frozen=True):
    r_max: float
    n_r: int

    def __post_init__(self):
        if self.n_r < 2:
            raise ConfigurationError(f"grid.n_r={self.n_r} must be >= 2")
        if not self.r_max > 0.0:
            raise ConfigurationError(f"grid.r_max={self.r_max} must be positive")

    @classmethod
    def from_cells(cls, r_max: float, cells: int) -> "RadialGrid":
        return cls(float(r_max), int(cells) + 1)

    @property
    def h(self) -> float:
        return self.r_max / (self.n_r - 1)

    def radii(self) -> np.ndarray:
        return np.arange(self.n_r, dtype=float) * self.h


class CartesianGrid3(Record, frozen=True):
    half_width: float
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ConfigurationError(f"grid.n={self.n} must be >= 3")
        if not self.half_width > 0.0:
            raise ConfigurationError(f"grid.half_width={self.half_width} must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / (self.n - 1)

    def axis(self) -> np.ndarray:
        return -self.half_width + np.arange(self.n, dtype=float) * self.h

    def radius_squared(self) -> np.ndarray:
        a = self.axis() ** 2
        return a[:, None, None] + a[None, :, None] + a[None, None, :]


Grid = Union[RadialGrid, CartesianGrid3]


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FieldSnapshot:
    """A field and its time derivative on a grid at one coordinate time."""

    frame: Frame
    time: float
    grid: Grid
    values: np.ndarray
    dvalues: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shape = (self.grid.n_r,) if isinstance(self.grid, RadialGrid) else (self.grid.n,) * 3
        values = _frozen_array(np.asarray(self.values, dtype=float))
        dvalues = _frozen_array(np.asarray(self.dvalues, dtype=float))
        mask = _frozen_array(np.asarray(self.mask, dtype=bool))
        for name, arr in (("values", values), ("dvalues", dvalues), ("mask", mask)):
            if arr.shape != shape:
                raise ConfigurationError(f"snapshot {name} has shape {arr.shape}, grid needs {shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dvalues", dvalues)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "time", float(self.time))

    @property
    def is_radial(self) -> bool:
        return isinstance(self.grid, RadialGrid)

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.mask))


# Report records
class EnergyReport(Record, frozen=True):
    time: float
    kinetic: float
    gradient: float
    potential: float
    total: float
    frame: str
    warnings: List[str] = []

    def __post_init__(self):
        if min(self.kinetic, self.gradient, self.potential) < 0.0:
            raise LabError("energy parts must be non-negative")


class FluxReport(Record, frozen=True):
    apex: SpacetimePoint
    flux: float
    e0: float
    margin: float
    resolution: float

    def __post_init__(self):
        if self.flux < 0.0:
            raise LabError(f"negative flux {self.flux} at apex {self.apex}")


class StokesBalance(Record, frozen=True):
    apex: SpacetimePoint
    bulk: float
    flux: float
    disk_energy: float
    residual: float
    resolution: float


class DecayFit(Record, frozen=True):
    exponent: float
    amplitude: float
    residual: float
    t_min: float
    t_max: float
    n_samples: int
    n_excluded: int = 0
    envelope: bool = False
    probe: str = ""

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise FitError(f"fit window ({self.t_min}, {self.t_max}) is empty")
        if self.n_samples < 8:
            raise FitError(f"fit used {self.n_samples} samples, at least 8 are required")


class WeightedSup(Record, frozen=True):
    value: float
    weight: str
    t: float
    x: Tuple[float, float, float]
    on_collar: bool = False


class StabilityReport(Record, frozen=True):
    resolutions: List[float]
    values: List[float]
    changes: List[float]
    threshold: float
    verdict: str


class ConvergenceOrder(Record, frozen=True):
    resolutions: List[float]
    values: List[float]
    differences: List[float]
    ratios: List[Optional[float]]
    order: Optional[float]
    status: str


class QuadratureResult(Record, frozen=True):
    value: float
    change: float
    converged: bool
    level: int
    evaluations: int


class ProbeExclusion(Record, frozen=True):
    index: int
    t: float
    x: Tuple[float, float, float]
    reason: str


class ProbeSeries(Record, frozen=True):
    label: str
    times: List[float]
    radii: List[float]
    values: List[float]
    excluded: List[ProbeExclusion] = []

    def magnitudes(self) -> np.ndarray:
        return np.abs(np.asarray(self.values, dtype=float))
