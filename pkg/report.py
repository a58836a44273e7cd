import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import msgspec

from model import ConfigurationError, Record, StabilityReport
from analysis import stability_verdict
from io_utils import ensure_directory, read_json, write_json
from pdf_utils import generate_acceptance_report_pdf
from scenario import Manifest, RunSummary

logger = logging.getLogger(__name__)

PASS, FAIL, SKIPPED = "pass", "fail", "skipped"


class AcceptanceRow(Record, frozen=True):
    number: int
    name: str
    verdict: str
    value: str
    threshold: str
    runs: List[str] = []
    note: str = ""


class ConsolidatedReport(Record, frozen=True):
    runs: List[RunSummary]
    rows: List[AcceptanceRow]
    stability: List[StabilityReport]
    missing: List[str]
    passed: bool


def _verdict(checks: Sequence[bool]) -> str:
    if not checks:
        return SKIPPED
    return PASS if all(checks) else FAIL


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return "n/a"
    return f"{value:.4g}"


def _row(number, name, checks, value, threshold, runs, note="") -> AcceptanceRow:
    verdict = _verdict(checks)
    if verdict == SKIPPED:
        logger.warning(f"Acceptance row {number} ({name}) skipped: no run produced the quantity")
    return AcceptanceRow(number=number, name=name, verdict=verdict, value=value, threshold=threshold, runs=runs, note=note)


def _finite(x: Optional[float]) -> bool:
    return x is not None and math.isfinite(x)


def _groups(summaries: Sequence[RunSummary]) -> Dict[Tuple[str, float, bool], List[RunSummary]]:
    """Runs of one geometry, power and centring at distinct resolutions, coarse to fine."""
    groups = defaultdict(dict)
    for s in summaries:
        groups[(s.geometry, s.power, s.centered)].setdefault(s.resolution, s)
    return {
        key: sorted(by_h.values(), key=lambda s: -s.resolution)
        for key, by_h in groups.items()
        if len(by_h) >= 2
    }


def _fit_tolerance(geometry: str, kind: str, power: float) -> float:
    if kind == "lightcone":
        return 0.2
    if geometry == "cart3d":
        return 0.3
    return 0.15 if power == 3.0 else 0.25


def acceptance_rows(summaries: Sequence[RunSummary]) -> Tuple[List[AcceptanceRow], List[StabilityReport]]:
    rows = []

    def names(subset):
        return [s.name for s in subset]

    have = [s for s in summaries if s.identity_order is not None]
    worst = min((s.identity_order for s in have), default=None)
    rows.append(_row(1, "conformal identity order", [s.identity_order >= 1.8 for s in have], _fmt(worst), ">= 1.8", names(have)))

    have = [s for s in summaries if s.map_identity_worst is not None]
    worst = max((s.map_identity_worst for s in have), default=None)
    rows.append(_row(2, "map identities", [s.map_identity_worst <= 1e-12 for s in have], _fmt(worst), "<= 1e-12 relative", names(have)))

    have = [s for s in summaries if s.energy_drift is not None]
    limit = {"radial": 0.01, "cart3d": 0.03}
    worst = max((s.energy_drift for s in have), default=None)
    rows.append(_row(3, "energy conservation", [s.energy_drift < limit[s.geometry] for s in have], _fmt(worst), "< 1% radial, < 3% 3D", names(have)))

    have = [s for s in summaries if s.flux_max_ratio is not None]
    checks = [s.flux_max_ratio <= 1.05 for s in have]
    note = ""
    groups = _groups(summaries)
    for key, runs in groups.items():
        pairs = [r for r in runs if r.stokes_residual_max is not None]
        if len(pairs) >= 2:
            coarse, fine = pairs[-2], pairs[-1]
            if fine.stokes_residual_max > 0.0 and coarse.stokes_residual_max > 0.0:
                order = math.log(coarse.stokes_residual_max / fine.stokes_residual_max) / math.log(coarse.resolution / fine.resolution)
            else:
                order = math.inf
            checks.append(order >= 1.0)
            note += f"Stokes residual order {order:.3g} for {key[0]} p={key[1]:g}. "
    worst = max((s.flux_max_ratio for s in have), default=None)
    rows.append(_row(4, "flux bounded by E0", checks, _fmt(worst), "Flux <= 1.05 E0; Stokes order >= 1", names(have), note.strip()))

    have = [s for s in summaries if s.boundedness_variation is not None]
    radial = [s for s in have if not s.boundedness_experimental]
    experimental = [s for s in have if s.boundedness_experimental]
    note = "; ".join(f"3D {s.name}: {s.boundedness_variation:.3%} (informational)" for s in experimental)
    worst = max((s.boundedness_variation for s in radial), default=None)
    rows.append(_row(5, "uniform boundedness", [s.boundedness_variation < 0.05 for s in radial], _fmt(worst), "running sup variation < 5%", names(radial), note))

    stability = []
    have = [s for s in summaries if s.weak_constant is not None]
    checks = [_finite(s.weak_constant) for s in have]
    for key, runs in groups.items():
        values = [r.weak_constant for r in runs if r.weak_constant is not None]
        if len(values) >= 2:
            report = stability_verdict([r.resolution for r in runs if r.weak_constant is not None], values)
            stability.append(report)
            checks.append(report.verdict == "stable")
    worst = max((s.weak_constant for s in have), default=None)
    rows.append(_row(6, "weak decay constant", checks, _fmt(worst), "finite, < 10% change between finest grids", names(have)))

    checks, details, used = [], [], []
    for s in summaries:
        for outcome in s.fits:
            tol = _fit_tolerance(s.geometry, outcome.kind, s.power)
            if outcome.fit is None:
                checks.append(False)
                details.append(f"{s.name} {outcome.probe}: {outcome.error}")
            else:
                checks.append(abs(outcome.fit.exponent - outcome.target) <= tol)
                details.append(f"{s.name} {outcome.probe}: {outcome.fit.exponent:.3f} vs {outcome.target:g} +- {tol:g}")
            used.append(s.name)
    rows.append(_row(7, "decay exponents", checks, "; ".join(details) or "n/a", "p-1 fixed x, 1 on the light-cone shell", sorted(set(used))))

    have = [s for s in summaries if s.lemma_max_ratio is not None]
    checks = []
    for s in have:
        checks.append(_finite(s.lemma_max_ratio) and s.lemma_change < 0.05 and s.lemma_unconverged == 0)
        if s.tophat_difference is not None:
            checks.append(s.tophat_difference <= 0.005)
    worst = max((s.lemma_max_ratio for s in have), default=None)
    rows.append(_row(8, "decay lemma ratio", checks, _fmt(worst), "finite, < 5% change, top-hat agreement 0.5%", names(have)))

    have = [s for s in summaries if s.huygens_max is not None]
    checks = [s.huygens_max <= 1e-10 for s in have]
    checks += [s.kirchhoff_change < 0.1 for s in have if s.kirchhoff_change is not None]
    worst = max((s.huygens_max for s in have), default=None)
    rows.append(_row(9, "Huygens support", checks, _fmt(worst), "|chi(t,0)| <= 1e-10, sup |chi| t stable", names(have)))

    have = [s for s in summaries if s.improvement_passed is not None]
    implied = max((s.implied_constant for s in have if s.implied_constant is not None), default=None)
    rows.append(_row(10, "improvement chain", [s.improvement_passed for s in have], _fmt(implied), "|phi| <= C^p retarded weight + |chi|", names(have)))

    if groups:
        checks = []
        for key, runs in groups.items():
            values = [r.strong_constant for r in runs if r.strong_constant is not None]
            if len(values) >= 2:
                report = stability_verdict([r.resolution for r in runs if r.strong_constant is not None], values)
                stability.append(report)
                checks.append(report.verdict == "stable")
        group_names = sorted({r.name for runs in groups.values() for r in runs})
        rows.append(_row(11, "refinement stability", checks, f"{len(checks)} group(s)", "strong constant < 10% change", group_names))
    return rows, stability


def _check_manifest(run_dir: Path, missing: List[str]) -> None:
    path = run_dir / "manifest.json"
    if not path.is_file():
        missing.append(str(path))
        return
    manifest = read_json(path, Manifest)
    for artifact in manifest.artifacts:
        target = run_dir / artifact.path
        if not target.is_file():
            missing.append(str(target))
        elif artifact.config_hash != manifest.config_hash:
            missing.append(f"{target} (config hash mismatch)")


def load_summaries(run_dirs: Sequence, missing: List[str]) -> List[RunSummary]:
    summaries = []
    for run_dir in map(Path, run_dirs):
        _check_manifest(run_dir, missing)
        path = run_dir / "summary.json"
        if not path.is_file():
            missing.append(str(path))
            continue
        try:
            summaries.append(read_json(path, RunSummary))
        except msgspec.ValidationError as e:
            logger.error(f"Unreadable summary {path}: {e}")
            missing.append(f"{path} (unreadable)")
    return summaries


def markdown_report(report: ConsolidatedReport) -> str:
    lines = ["# Acceptance report", "", "| # | check | verdict | value | threshold |", "|---|---|---|---|---|"]
    for row in report.rows:
        lines.append(f"| {row.number} | {row.name} | {row.verdict} | {row.value} | {row.threshold} |")
    lines += ["", "## Runs", "", "| run | geometry | p | h | drift | strong C | weak C |", "|---|---|---|---|---|---|---|"]
    for s in report.runs:
        lines.append(
            f"| {s.name} | {s.geometry} | {s.power:g} | {s.resolution:.4g} | {_fmt(s.energy_drift)} "
            f"| {_fmt(s.strong_constant)} | {_fmt(s.weak_constant)} |"
        )
    if report.missing:
        lines += ["", "## Missing artifacts", ""] + [f"- {m}" for m in report.missing]
    return "\n".join(lines) + "\n"


def write_report(run_dirs: Sequence, out_dir) -> ConsolidatedReport:
    """Aggregate run directories into report.json, report.md and report.pdf under out_dir."""
    if not run_dirs:
        raise ConfigurationError("report needs at least one run directory")
    missing: List[str] = []
    summaries = load_summaries(run_dirs, missing)
    rows, stability = acceptance_rows(summaries)
    report = ConsolidatedReport(
        runs=summaries,
        rows=rows,
        stability=stability,
        missing=missing,
        passed=all(row.verdict != FAIL for row in rows),
    )
    out = ensure_directory(out_dir)
    write_json(out / "report.json", report)
    (out / "report.md").write_text(markdown_report(report), encoding="utf-8")
    generate_acceptance_report_pdf(report, str(out / "report.pdf"))
    if missing:
        logger.warning(f"Report written with {len(missing)} missing artifacts")
    logger.info(f"Report over {len(summaries)} runs written to {out}: {'pass' if report.passed else 'FAIL'}")
    return report
