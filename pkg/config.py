import configparser
import hashlib
import logging
import math
import os
import typing
from pathlib import Path
from typing import List, Optional, Tuple

import msgspec
from dotenv import load_dotenv

from model import (
    CartesianGrid3,
    ConfigurationError,
    InitialDataSpec,
    LabError,
    Power,
    RadialGrid,
)

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Runtime settings read from the environment."""

    WORKERS = int(os.getenv("WAVELAB_WORKERS", "1"))

    @staticmethod
    def workers() -> int:
        """Worker count for the 3D stencil; re-read so tests can patch the environment."""
        raw = os.getenv("WAVELAB_WORKERS", str(Config.WORKERS))
        try:
            value = int(raw)
        except ValueError:
            raise ConfigurationError(f"WAVELAB_WORKERS={raw!r} is not an integer")
        if value < 1:
            raise ConfigurationError(f"WAVELAB_WORKERS={value} must be >= 1")
        return value


# Scenario file schema. One Struct per INI section.
class ScenarioSection(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    name: str = "scenario"
    geometry: str = "radial"
    power: float = 3.0
    t_end: float = 10.0
    cfl: float = 0.5
    output_times: List[float] = []

    def __post_init__(self):
        if self.geometry not in ("radial", "cart3d"):
            raise ConfigurationError(
                f"scenario.geometry={self.geometry!r} must be 'radial' or 'cart3d'"
            )
        if not (3.0 <= self.power < 5.0):
            raise ConfigurationError(
                f"scenario.power={self.power} is outside the decay range 3 <= p < 5"
            )
        if not self.t_end > 1.0:
            raise ConfigurationError(f"scenario.t_end={self.t_end} must be greater than 1")
        if not 0.0 < self.cfl <= 1.0:
            raise ConfigurationError(f"scenario.cfl={self.cfl} must lie in (0, 1]")
        for t in self.output_times:
            if not 1.0 <= t <= self.t_end:
                raise ConfigurationError(
                    f"scenario.output_times entry {t} lies outside [1, {self.t_end}]"
                )


class DataSection(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    amplitude: float = 1.0
    support_radius: float = 0.5
    phi0_power: int = 4
    phi1_power: int = 3
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_spec(self) -> InitialDataSpec:
        return InitialDataSpec(
            amplitude=self.amplitude,
            support_radius=self.support_radius,
            phi0_power=self.phi0_power,
            phi1_power=self.phi1_power,
            center=tuple(self.center),
        )


class GridSection(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    n_r: int = 801
    r_max: Optional[float] = None
    half_width: float = 12.0
    n: int = 97


class CompactifiedSection(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    enabled: bool = False
    t_end: float = -0.05
    n_r: int = 801
    cfl: float = 0.5
    collar: int = 2
    snapshot_every: int = 4

    def __post_init__(self):
        if not -1.0 < self.t_end < 0.0:
            raise ConfigurationError(f"compactified.t_end={self.t_end} must lie in (-1, 0)")
        if not 0.0 < self.cfl <= 1.0:
            raise ConfigurationError(f"compactified.cfl={self.cfl} must lie in (0, 1]")
        if self.collar < 1:
            raise ConfigurationError(f"compactified.collar={self.collar} must be >= 1")
        if self.snapshot_every < 1:
            raise ConfigurationError(
                f"compactified.snapshot_every={self.snapshot_every} must be >= 1"
            )


class DiagnosticsSection(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    apexes: int = 20
    seed: int = 12345
    flux_angles: int = 16

    def __post_init__(self):
        if self.apexes < 0:
            raise ConfigurationError(f"diagnostics.apexes={self.apexes} must be >= 0")
        if self.flux_angles < 4:
            raise ConfigurationError(f"diagnostics.flux_angles={self.flux_angles} must be >= 4")


class AnalysisSection(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    probe_radii: List[float] = msgspec.field(default_factory=lambda: [0.0])
    fit_window: Tuple[float, float] = (20.0, 200.0)
    lightcone_shell: float = 1.5
    lightcone_window: Tuple[float, float] = (10.0, 80.0)
    stability_threshold: float = 0.1

    def __post_init__(self):
        for key in ("fit_window", "lightcone_window"):
            lo, hi = getattr(self, key)
            if not 1.0 <= lo < hi:
                raise ConfigurationError(f"analysis.{key}=({lo}, {hi}) must satisfy 1 <= lo < hi")
        if any(r < 0.0 for r in self.probe_radii):
            raise ConfigurationError("analysis.probe_radii entries must be non-negative")
        if not 0.0 < self.stability_threshold < 1.0:
            raise ConfigurationError(
                f"analysis.stability_threshold={self.stability_threshold} must lie in (0, 1)"
            )


class DuhamelSection(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    enabled: bool = True
    samples: int = 50
    lemma_times: List[float] = msgspec.field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0])
    resolution: int = 32
    tolerance: float = 1e-3

    def __post_init__(self):
        if self.resolution < 4:
            raise ConfigurationError(f"duhamel.resolution={self.resolution} must be >= 4")
        if not 0.0 < self.tolerance < 0.1:
            raise ConfigurationError(f"duhamel.tolerance={self.tolerance} must lie in (0, 0.1)")
        if any(not 1.0 <= t <= 100.0 for t in self.lemma_times):
            raise ConfigurationError("duhamel.lemma_times entries must lie in [1, 100]")


class OutputSection(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    directory: str = "runs"


SECTIONS = {
    "scenario": ScenarioSection,
    "data": DataSection,
    "grid": GridSection,
    "compactified": CompactifiedSection,
    "diagnostics": DiagnosticsSection,
    "analysis": AnalysisSection,
    "duhamel": DuhamelSection,
    "output": OutputSection,
}


class ScenarioConfig(msgspec.Struct, frozen=True):
    scenario: ScenarioSection = ScenarioSection()
    data: DataSection = DataSection()
    grid: GridSection = GridSection()
    compactified: CompactifiedSection = CompactifiedSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()
    analysis: AnalysisSection = AnalysisSection()
    duhamel: DuhamelSection = DuhamelSection()
    output: OutputSection = OutputSection()

    @property
    def power(self) -> Power:
        return Power(self.scenario.power)

    def data_spec(self) -> InitialDataSpec:
        return self.data.to_spec()

    def physical_grid(self):
        """Grid of the physical run, with r_max defaulted to the exact-boundary minimum."""
        spec = self.data_spec()
        if self.scenario.geometry == "cart3d":
            return CartesianGrid3(self.grid.half_width, self.grid.n)
        r_max = self.grid.r_max
        if r_max is None:
            r_max = math.ceil(self.scenario.t_end - 1.0 + spec.outer_radius + 1.0)
        return RadialGrid(float(r_max), self.grid.n_r)

    def validate(self) -> "ScenarioConfig":
        """Cross-section checks that no single section can make on its own."""
        spec = self.data_spec()
        grid = self.physical_grid()
        h = grid.h
        if spec.support_radius / h < 4.0:
            raise ConfigurationError(
                f"grid resolves data.support_radius={spec.support_radius} by "
                f"{spec.support_radius / h:.2f} cells, at least 4 are required"
            )
        t_end = self.scenario.t_end
        if isinstance(grid, RadialGrid):
            if not spec.is_centered:
                raise ConfigurationError("data.center must be zero for scenario.geometry='radial'")
            if grid.r_max < t_end - 1.0 + spec.outer_radius:
                raise ConfigurationError(
                    f"grid.r_max={grid.r_max} is smaller than t_end - 1 + alpha = "
                    f"{t_end - 1.0 + spec.outer_radius}"
                )
        else:
            if t_end - 1.0 + spec.outer_radius > grid.half_width - 2.0 * h:
                raise ConfigurationError(
                    f"scenario.t_end={t_end} is too large for grid.half_width={grid.half_width}"
                    f" (need t_end - 1 + alpha <= L - 2h)"
                )
        if self.compactified.enabled and self.scenario.t_end < 1.25:
            raise ConfigurationError(
                f"scenario.t_end={t_end} is too short for the hyperboloid handoff (needs >= 1.25)"
            )
        return self


def _split_list(raw: str) -> List[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _is_sequence(annotation) -> bool:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        return any(_is_sequence(arg) for arg in typing.get_args(annotation))
    return origin in (list, tuple)


def _convert_section(name: str, raw: dict):
    section_type = SECTIONS[name]
    fields = {f.name: f for f in msgspec.structs.fields(section_type)}
    values = {}
    for key, text in raw.items():
        if key not in fields:
            raise ConfigurationError(f"{name}.{key} is not a recognised configuration key")
        values[key] = _split_list(text) if _is_sequence(fields[key].type) else text.strip()
    try:
        return msgspec.convert(values, type=section_type, strict=False)
    except msgspec.ValidationError as e:
        raise ConfigurationError(f"[{name}] {e}") from e


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse INI text into a validated ScenarioConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed scenario file: {e}") from e

    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigurationError(f"[{name}] is not a recognised section")
        sections[name] = _convert_section(name, dict(parser.items(name)))
    try:
        return ScenarioConfig(**sections).validate()
    except ConfigurationError:
        raise
    except LabError as e:
        raise ConfigurationError(str(e)) from e


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"scenario file {path} does not exist")
    config = parse_scenario(path.read_text(encoding="utf-8"))
    logger.info(f"Loaded scenario '{config.scenario.name}' from {path}")
    return config


def config_hash(path) -> str:
    """SHA-256 of the raw scenario file bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
