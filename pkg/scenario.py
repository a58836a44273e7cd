import logging
import math
import platform
import time
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional

import msgspec
import numpy as np

from config import ScenarioConfig, config_hash, load_scenario
from model import (
    CartesianGrid3,
    DecayFit,
    LabError,
    RadialGrid,
    SpacetimePoint,
    SupportError,
    WeightChoice,
)
from core import build_bump_data, worldline_sampler
from conformal import clamped_coefficient, gaussian_test_function, identity_order_study, map_identity_report
from solver_radial import (
    compactified_grid,
    evolve_compactified_radial,
    evolve_physical_radial,
    hyperboloid_handoff,
    hyperboloid_sampler,
    step_count,
)
from solver_cart3d import (
    MAX_CFL_3D,
    cartesian_sampler,
    embed_radial_data,
    evolve_compactified_3d,
    evolve_physical_3d,
    probe_field,
)
from diagnostics import (
    SnapshotHistory,
    divergence_residual,
    e0_initial_energy,
    energy_drift,
    mantle_flux,
    random_apexes,
    slice_energy,
)
from analysis import (
    compare_weights,
    fit_lightcone_decay,
    fit_series,
    lightcone_worldline,
    running_sup,
    weighted_sup_constant,
)
from duhamel import (
    TopHatSource,
    decay_lemma_ratio,
    free_solution_kirchhoff,
    improved_bound_check,
    kirchhoff_decay_profile,
    lemma_sample_points,
    retarded_potential,
)
from io_utils import ensure_directory, sha256_file, write_csv, write_json, write_snapshot

logger = logging.getLogger(__name__)

# Interior point of the forward cone used for the identity order study.
IDENTITY_POINT = SpacetimePoint(3.0, (0.5, 0.3, 0.2))
KIRCHHOFF_TIMES = (2.0, 5.0, 10.0, 20.0, 50.0, 100.0)
TOPHAT_POINT = SpacetimePoint.on_axis(2.5, 0.75)


class StageRecord(msgspec.Struct):
    name: str
    status: str
    wall_time: float = 0.0
    error: Optional[str] = None


class ArtifactRecord(msgspec.Struct):
    path: str
    sha256: str
    config_hash: str


class Manifest(msgspec.Struct):
    name: str
    config_path: str
    config_hash: str
    geometry: str
    power: float
    resolution: float
    cells: int
    versions: Dict[str, str]
    stages: List[StageRecord] = []
    artifacts: List[ArtifactRecord] = []
    failed_stage: Optional[str] = None


class FitOutcome(msgspec.Struct):
    probe: str
    kind: str
    target: float
    fit: Optional[DecayFit] = None
    error: Optional[str] = None


class RunSummary(msgspec.Struct):
    """Acceptance quantities of one run; None where a stage did not apply."""

    name: str
    geometry: str
    power: float
    resolution: float
    cells: int
    config_hash: str
    centered: bool = True
    identity_order: Optional[float] = None
    map_identity_worst: Optional[float] = None
    energy_drift: Optional[float] = None
    handoff_truncation: Optional[float] = None
    flux_max_ratio: Optional[float] = None
    flux_count: int = 0
    stokes_residual_max: Optional[float] = None
    boundedness_variation: Optional[float] = None
    boundedness_experimental: bool = False
    strong_constant: Optional[float] = None
    weak_constant: Optional[float] = None
    regularized_constant: Optional[float] = None
    weights_consistent: Optional[bool] = None
    fits: List[FitOutcome] = []
    lemma_max_ratio: Optional[float] = None
    lemma_change: Optional[float] = None
    lemma_unconverged: Optional[int] = None
    tophat_difference: Optional[float] = None
    huygens_max: Optional[float] = None
    kirchhoff_change: Optional[float] = None
    improvement_passed: Optional[bool] = None
    implied_constant: Optional[float] = None
    improvement_samples: int = 0


def _versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for package in ("numpy", "scipy", "msgspec"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def run_directory(config: ScenarioConfig, digest: str, out_dir=None) -> Path:
    base = Path(out_dir) if out_dir is not None else Path(config.output.directory)
    return base / f"{config.scenario.name}-{digest[:12]}"


class ScenarioRun:
    """One scenario pipeline; stages share state through attributes."""

    def __init__(self, config: ScenarioConfig, config_path, digest: str, run_dir: Path):
        self.config = config
        self.digest = digest
        self.run_dir = ensure_directory(run_dir)
        self.power = config.power.p
        self.spec = config.data_spec()
        self.grid = config.physical_grid()
        cells = self.grid.n_r if isinstance(self.grid, RadialGrid) else self.grid.n
        self.manifest = Manifest(
            name=config.scenario.name,
            config_path=str(config_path),
            config_hash=digest,
            geometry=config.scenario.geometry,
            power=self.power,
            resolution=self.grid.h,
            cells=cells,
            versions=_versions(),
        )
        self.summary = RunSummary(
            name=config.scenario.name,
            geometry=config.scenario.geometry,
            power=self.power,
            resolution=self.grid.h,
            cells=cells,
            config_hash=digest,
            centered=self.spec.is_centered,
        )
        self.physical = None
        self.compactified = None
        self.handoff = None
        self.probe_samplers = []
        self.lightcone_sampler = None
        self.trace = None

    # Bookkeeping
    def _artifact(self, path: Path) -> None:
        self.manifest.artifacts.append(
            ArtifactRecord(path=str(path.relative_to(self.run_dir)), sha256=sha256_file(path), config_hash=self.digest)
        )

    def _csv(self, name: str, names, columns) -> None:
        self._artifact(write_csv(self.run_dir / name, names, columns, self.digest))

    def _json(self, name: str, obj) -> None:
        self._artifact(write_json(self.run_dir / name, obj))

    def _write_manifest(self) -> None:
        write_json(self.run_dir / "manifest.json", self.manifest)

    @contextmanager
    def stage(self, name: str):
        record = StageRecord(name=name, status="running")
        self.manifest.stages.append(record)
        start = time.perf_counter()
        logger.info(f"Stage '{name}' started")
        try:
            yield record
        except Exception as e:
            record.status = "failed"
            record.error = f"{type(e).__name__}: {e}"
            record.wall_time = time.perf_counter() - start
            self.manifest.failed_stage = name
            self._write_manifest()
            logger.error(f"Stage '{name}' failed: {e}", exc_info=True)
            raise
        if record.status == "running":
            record.status = "ok"
        record.wall_time = time.perf_counter() - start
        self._write_manifest()
        logger.info(f"Stage '{name}' {record.status} in {record.wall_time:.2f}s")

    # Stages
    def stage_conformal(self) -> None:
        rows = identity_order_study(gaussian_test_function, IDENTITY_POINT)
        self._csv(
            "conformal_identity.csv",
            ["h_step", "residual", "order"],
            [[r.h_step for r in rows], [r.residual for r in rows], [np.nan if r.order is None else r.order for r in rows]],
        )
        orders = [r.order for r in rows if r.order is not None]
        self.summary.identity_order = orders[-1] if orders else None
        report = map_identity_report(1000, seed=self.config.diagnostics.seed)
        self._json("map_identities.json", report)
        self.summary.map_identity_worst = report.worst

    def _probe_points(self, r0: float, t_end: float, count: int = 200):
        times = np.geomspace(1.0, t_end, count)
        return [SpacetimePoint.on_axis(t, r0) for t in times]

    def stage_physical(self) -> None:
        cfg = self.config
        t_end = cfg.scenario.t_end
        data = build_bump_data(self.spec, self.grid)
        radial = isinstance(self.grid, RadialGrid)
        output_times = sorted(set(cfg.scenario.output_times) | {t_end})

        self.probe_samplers = []
        for k, r0 in enumerate(cfg.analysis.probe_radii):
            points = self._probe_points(r0, t_end)
            if radial:
                sampler = worldline_sampler(points, label=f"r={r0:g}")
            else:
                sampler = cartesian_sampler(points, label=f"x=({r0:g},0,0)")
            self.probe_samplers.append(sampler)
        samplers = list(self.probe_samplers)

        v0 = cfg.analysis.lightcone_shell
        shell = [pt for pt in lightcone_worldline(v0, cfg.analysis.lightcone_window) if pt.t <= t_end]
        if shell and not cfg.compactified.enabled:
            self.lightcone_sampler = worldline_sampler(shell, label=f"shell v0={v0:g}", radial=radial)
            samplers.append(self.lightcone_sampler)

        if radial:
            n_steps = step_count(t_end - 1.0, self.grid.h, cfg.scenario.cfl)
            if cfg.compactified.enabled:
                dt = (t_end - 1.0) / n_steps
                reach = max(t_end - dt - 0.5, 0.5)
                self.trace = hyperboloid_sampler(self.grid, math.sqrt(reach * reach - 0.25))
                samplers.append(self.trace)
            self.physical = evolve_physical_radial(
                data, self.power, t_end, cfg.scenario.cfl, output_times, samplers,
                snapshot_every=max(1, n_steps // 40),
            )
        else:
            energy_times = sorted(set(output_times) | set(np.linspace(1.0, t_end, 13).tolist()))
            self.physical = evolve_physical_3d(data, self.power, t_end, cfg.scenario.cfl, energy_times, samplers)

        reports = [slice_energy(s, self.power) for s in self.physical.snapshots]
        self._csv(
            "energy.csv",
            ["time", "kinetic", "gradient", "potential", "total"],
            [[getattr(r, key) for r in reports] for key in ("time", "kinetic", "gradient", "potential", "total")],
        )
        self.summary.energy_drift = energy_drift(reports)
        logger.info(f"Physical energy drift {self.summary.energy_drift:.3e}")

        for k, sampler in enumerate(self.probe_samplers):
            series = sampler.to_series()
            self._csv(f"probe_{k}.csv", ["t", "r", "value"], [series.times, series.radii, series.values])

        wanted = set(output_times)
        for snap in self.physical.snapshots:
            if any(abs(snap.time - t) <= 0.5 * self.physical.dt for t in wanted):
                stem = self.run_dir / f"physical_t{snap.time:.6f}"
                for path in write_snapshot(stem, snap, self.digest):
                    self._artifact(path)

    def _radial_trace(self):
        """Hyperboloid trace; 3D scenarios take it from a companion radial run."""
        if self.trace is not None:
            return self.trace
        cfg = self.config
        if not self.spec.is_centered:
            raise SupportError("the compactified path needs centred data")
        t_end = cfg.scenario.t_end
        grid = RadialGrid(float(math.ceil(t_end - 1.0 + self.spec.outer_radius + 1.0)), cfg.grid.n_r)
        n_steps = step_count(t_end - 1.0, grid.h, 0.5)
        reach = max(t_end - (t_end - 1.0) / n_steps - 0.5, 0.5)
        trace = hyperboloid_sampler(grid, math.sqrt(reach * reach - 0.25))
        evolve_physical_radial(build_bump_data(self.spec, grid), self.power, t_end, 0.5, samplers=[trace])
        return trace

    def stage_handoff(self) -> None:
        comp = self.config.compactified
        grid = compactified_grid(comp.t_end, comp.n_r)
        outgoing_after = max(2.0, 1.5 + self.spec.outer_radius)
        self.handoff = hyperboloid_handoff(self._radial_trace(), grid, outgoing_after=outgoing_after)
        self._json(
            "handoff.json",
            {"r_cover": self.handoff.r_cover, "rt_cover": self.handoff.rt_cover, "truncation_level": self.handoff.truncation_level},
        )
        self.summary.handoff_truncation = self.handoff.truncation_level

    def stage_compactified(self, record: StageRecord) -> None:
        comp = self.config.compactified
        if isinstance(self.grid, RadialGrid):
            self.compactified = evolve_compactified_radial(
                self.handoff.snapshot, self.power, comp.t_end, comp.cfl,
                collar=comp.collar, snapshot_every=comp.snapshot_every,
            )
        else:
            box = CartesianGrid3(self.handoff.snapshot.grid.r_max, self.grid.n)
            cube = embed_radial_data(self.handoff.snapshot, box)
            times = np.linspace(-1.0, comp.t_end, 41).tolist()
            try:
                self.compactified = evolve_compactified_3d(
                    cube, self.power, comp.t_end, min(comp.cfl, 0.5 * MAX_CFL_3D), times, collar=comp.collar,
                )
            except SupportError as e:
                record.status = "skipped"
                record.error = str(e)
                logger.warning(f"Experimental 3D compactified run skipped: {e}")
                return
        reports = [
            slice_energy(s, self.power, lambda rr, t=s.time: clamped_coefficient(t, rr, self.power))
            for s in self.compactified.snapshots
        ]
        self._csv(
            "compactified_energy.csv",
            ["time", "kinetic", "gradient", "potential", "total"],
            [[getattr(r, key) for r in reports] for key in ("time", "kinetic", "gradient", "potential", "total")],
        )

    def stage_boundedness(self) -> None:
        comp = self.config.compactified
        report = running_sup(self.compactified.snapshots, (-0.5, comp.t_end))
        self._json("boundedness.json", report)
        self.summary.boundedness_variation = report.variation
        self.summary.boundedness_experimental = not isinstance(self.grid, RadialGrid)

    def stage_flux(self) -> None:
        diag = self.config.diagnostics
        history = SnapshotHistory(self.compactified.snapshots)
        e0 = e0_initial_energy(self.handoff.snapshot, self.power)
        margin = (self.config.compactified.collar + 1) * history.resolution
        # apexes must lie below the last compactified slice
        t_hi = min(-0.2, float(history.times[-1]))
        t_range = (min(-0.9, 0.5 * (t_hi - 1.0)), t_hi)
        fluxes, balances = [], []
        for apex in random_apexes(diag.apexes, diag.seed, margin, t_range):
            fluxes.append(mantle_flux(history, apex, self.power, e0, diag.flux_angles))
            balances.append(divergence_residual(history, apex, self.power, diag.flux_angles))
        self._json("flux.json", {"e0": e0, "fluxes": fluxes, "stokes": balances})
        if fluxes:
            self.summary.flux_max_ratio = max(f.flux for f in fluxes) / e0 if e0 > 0.0 else math.inf
            self.summary.stokes_residual_max = max(b.residual for b in balances)
        self.summary.flux_count = len(fluxes)

    def _fit(self, probe: str, kind: str, target: float, compute) -> FitOutcome:
        try:
            return FitOutcome(probe=probe, kind=kind, target=target, fit=compute())
        except LabError as e:
            logger.warning(f"Fit {probe} not available: {e}")
            return FitOutcome(probe=probe, kind=kind, target=target, error=str(e))

    def stage_fits(self) -> None:
        ana = self.config.analysis
        window = tuple(ana.fit_window)
        target = self.power - 1.0
        outcomes = []
        comp_snaps = self.compactified.snapshots if self.compactified is not None else None
        radial = isinstance(self.grid, RadialGrid)
        for r0, sampler in zip(ana.probe_radii, self.probe_samplers):
            if comp_snaps is not None and radial:
                points = [SpacetimePoint.on_axis(t, r0) for t in np.geomspace(window[0], window[1], 60)]
                label = f"r={r0:g} (compactified)"
                outcomes.append(self._fit(
                    label, "fixed", target,
                    lambda pts=points, label=label: fit_series(probe_field(comp_snaps, pts, to_physical=True, label=label), window),
                ))
            else:
                outcomes.append(self._fit(sampler.label, "fixed", target, lambda s=sampler: fit_series(s.to_series(), window)))

        v0 = ana.lightcone_shell
        u_window = tuple(ana.lightcone_window)
        label = f"shell v0={v0:g}"
        if comp_snaps is not None and radial:
            outcomes.append(self._fit(label, "lightcone", 1.0, lambda: fit_lightcone_decay(comp_snaps, v0, u_window)))
        elif self.lightcone_sampler is not None:
            outcomes.append(self._fit(
                label, "lightcone", 1.0,
                lambda: fit_series(self.lightcone_sampler.to_series(), (1.0 + u_window[0], 1.0 + u_window[1]), abscissa="u"),
            ))
        self.summary.fits = outcomes
        self._json("fits.json", outcomes)

    def _weighted_snapshots(self):
        snaps = list(self.physical.snapshots)
        if self.compactified is not None:
            snaps += list(self.compactified.snapshots)
        return snaps

    def stage_weighted(self) -> None:
        snaps = self._weighted_snapshots()
        strong = weighted_sup_constant(snaps, self.power, WeightChoice.STRONG)
        weak = weighted_sup_constant(snaps, self.power, WeightChoice.WEAK)
        regularized = weighted_sup_constant(snaps, self.power, WeightChoice.REGULARIZED)
        comparison = compare_weights(snaps, self.spec.outer_radius)
        self._json("weighted.json", {"strong": strong, "weak": weak, "regularized": regularized, "comparison": comparison})
        self.summary.strong_constant = strong.value
        self.summary.weak_constant = weak.value
        self.summary.regularized_constant = regularized.value
        self.summary.weights_consistent = comparison.consistent

    def _improvement_samples(self, count: int):
        """Up to count measured (point, |phi|) pairs inside the support cone of the physical snapshots."""
        rng = np.random.default_rng(self.config.diagnostics.seed)
        candidates = []
        alpha = self.spec.outer_radius
        for snap in self.physical.snapshots:
            if snap.time <= 1.0:
                continue
            if snap.is_radial:
                radii = snap.grid.radii()
                idx = np.nonzero(snap.mask & (radii <= snap.time - 1.0 + alpha) & (snap.values != 0.0))[0]
                candidates += [(SpacetimePoint.on_axis(snap.time, radii[i]), snap.values[i]) for i in idx]
            else:
                axis = snap.grid.axis()
                r = np.sqrt(snap.grid.radius_squared())
                idx = np.argwhere(snap.mask & (r <= snap.time - 1.0 + alpha) & (snap.values != 0.0))
                idx = idx[:: max(1, len(idx) // (4 * count))]
                candidates += [
                    (SpacetimePoint(snap.time, (float(axis[i]), float(axis[j]), float(axis[k]))), snap.values[i, j, k])
                    for i, j, k in idx
                ]
        if len(candidates) <= count:
            return candidates
        picks = np.sort(rng.choice(len(candidates), size=count, replace=False))
        return [candidates[i] for i in picks]

    def _free_values(self, points: List[SpacetimePoint]) -> List[float]:
        """The free wave from the same data, grid and step, read at the given events."""
        cfg = self.config
        data = build_bump_data(self.spec, self.grid)
        t_end = cfg.scenario.t_end
        if isinstance(self.grid, RadialGrid):
            sampler = worldline_sampler(points, label="free")
            evolve_physical_radial(data, self.power, t_end, cfg.scenario.cfl, samplers=[sampler], linear=True)
        else:
            sampler = cartesian_sampler(points, label="free")
            evolve_physical_3d(data, self.power, t_end, cfg.scenario.cfl, samplers=[sampler], linear=True)
        return [float(v) for v in sampler.values]

    def stage_duhamel(self) -> None:
        duh = self.config.duhamel
        points = lemma_sample_points(duh.lemma_times)
        coarse = decay_lemma_ratio(self.power, points, duh.resolution, duh.tolerance)
        fine = decay_lemma_ratio(self.power, points, 2 * duh.resolution, duh.tolerance)
        self._json("lemma.json", {"coarse": coarse, "fine": fine})
        self.summary.lemma_max_ratio = fine.max_ratio
        self.summary.lemma_change = abs(fine.max_ratio - coarse.max_ratio) / fine.max_ratio if fine.max_ratio else 0.0
        self.summary.lemma_unconverged = fine.unconverged

        tophat = TopHatSource()
        reduced = retarded_potential(tophat, TOPHAT_POINT, duh.resolution, duh.tolerance, method="radial")
        shell = retarded_potential(tophat, TOPHAT_POINT, 16, duh.tolerance, method="shell")
        self.summary.tophat_difference = abs(reduced.value - shell.value) / abs(reduced.value)
        self._json("tophat.json", {"radial": reduced, "shell": shell, "difference": self.summary.tophat_difference})

        h = self.grid.h
        alpha = self.spec.support_radius
        huygens_times = np.linspace(1.0 + alpha + 2.0 * h + 1e-9, max(self.config.scenario.t_end, 2.0 + alpha), 10)
        center = self.spec.center
        chi_axis = [abs(free_solution_kirchhoff(self.spec, SpacetimePoint(float(t), center))) for t in huygens_times]
        self.summary.huygens_max = max(chi_axis)
        if self.spec.is_centered:
            profile = kirchhoff_decay_profile(self.spec, KIRCHHOFF_TIMES, 64)
            refined = kirchhoff_decay_profile(self.spec, KIRCHHOFF_TIMES, 128)
            self.summary.kirchhoff_change = max((abs(a - b) / b for a, b in zip(profile, refined) if b > 0.0), default=0.0)
            self._csv("kirchhoff.csv", ["t", "sup_chi_t", "sup_chi_t_refined"], [list(KIRCHHOFF_TIMES), profile, refined])
        self._csv("huygens.csv", ["t", "abs_chi"], [huygens_times, chi_axis])

        samples = self._improvement_samples(duh.samples)
        if samples and self.summary.regularized_constant is not None:
            report = improved_bound_check(
                self.summary.regularized_constant, self.power, samples, self.spec, duh.resolution, duh.tolerance,
                free_values=self._free_values([pt for pt, _ in samples]),
            )
            self._json("improvement.json", report)
            self.summary.improvement_passed = report.passed
            self.summary.implied_constant = report.implied_constant
            self.summary.improvement_samples = len(samples)

    def run(self) -> Path:
        cfg = self.config
        with self.stage("conformal"):
            self.stage_conformal()
        with self.stage("physical"):
            self.stage_physical()
        if cfg.compactified.enabled:
            with self.stage("handoff"):
                self.stage_handoff()
            with self.stage("compactified") as record:
                self.stage_compactified(record)
            if self.compactified is not None:
                with self.stage("boundedness"):
                    self.stage_boundedness()
                if isinstance(self.grid, RadialGrid) and cfg.diagnostics.apexes > 0:
                    with self.stage("flux"):
                        self.stage_flux()
        with self.stage("fits"):
            self.stage_fits()
        with self.stage("weighted"):
            self.stage_weighted()
        if cfg.duhamel.enabled:
            with self.stage("duhamel"):
                self.stage_duhamel()
        with self.stage("summary"):
            self._json("summary.json", self.summary)
        return self.run_dir


def run_scenario(path, out_dir=None) -> Path:
    """Run the configured pipeline; returns the run directory holding every artifact."""
    config = load_scenario(path)
    digest = config_hash(path)
    run_dir = run_directory(config, digest, out_dir)
    logger.info(f"Running scenario '{config.scenario.name}' into {run_dir}")
    return ScenarioRun(config, path, digest, run_dir).run()
