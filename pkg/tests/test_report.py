"""Tests for the acceptance table built from run summaries and the
consolidated report files."""
import pytest

from model import ConfigurationError, DecayFit
from io_utils import read_json, write_json
from report import FAIL, PASS, SKIPPED, acceptance_rows, write_report
from scenario import ArtifactRecord, FitOutcome, Manifest, RunSummary


def _summary(name, resolution, **overrides):
    values = dict(
        name=name,
        geometry="radial",
        power=3.0,
        resolution=resolution,
        cells=int(round(10.0 / resolution)) + 1,
        config_hash="h",
        identity_order=2.0,
        map_identity_worst=1e-15,
        energy_drift=0.002,
        flux_max_ratio=0.9,
        stokes_residual_max=0.04 if resolution > 0.075 else 0.01,
        boundedness_variation=0.01,
        strong_constant=9.0 if resolution > 0.075 else 9.3,
        weak_constant=1.0 if resolution > 0.075 else 1.02,
        lemma_max_ratio=1.4,
        lemma_change=0.01,
        lemma_unconverged=0,
        tophat_difference=0.001,
        huygens_max=0.0,
        kirchhoff_change=0.01,
        improvement_passed=True,
        implied_constant=50.0,
    )
    values.update(overrides)
    return RunSummary(**values)


def _verdicts(rows):
    return {row.number: row.verdict for row in rows}


# ---------------------------------------------------------------------------
# Acceptance rows
# ---------------------------------------------------------------------------

def test_refined_pair_passes_every_row():
    rows, stability = acceptance_rows([_summary("coarse", 0.1), _summary("fine", 0.05)])
    verdicts = _verdicts(rows)
    assert sorted(verdicts) == list(range(1, 12))
    assert verdicts[7] == SKIPPED
    assert all(verdicts[n] == PASS for n in verdicts if n != 7)
    # weak and strong constant groups
    assert len(stability) == 2
    assert all(report.verdict == "stable" for report in stability)


def test_no_summaries_skip_everything():
    rows, stability = acceptance_rows([])
    assert {row.verdict for row in rows} == {SKIPPED}
    assert stability == []


def test_energy_drift_limits_depend_on_geometry():
    radial = _summary("radial", 0.1, energy_drift=0.02)
    box = _summary("box", 0.1, geometry="cart3d", energy_drift=0.02)
    assert _verdicts(acceptance_rows([radial])[0])[3] == FAIL
    assert _verdicts(acceptance_rows([box])[0])[3] == PASS


def test_fit_rows_use_targets_and_errors():
    good = FitOutcome(
        probe="r=0", kind="fixed", target=2.0,
        fit=DecayFit(exponent=2.05, amplitude=1.0, residual=0.01, t_min=20.0, t_max=200.0, n_samples=60),
    )
    missing = FitOutcome(probe="r=1", kind="fixed", target=2.0, error="fit used 3 samples")
    assert _verdicts(acceptance_rows([_summary("a", 0.1, fits=[good])])[0])[7] == PASS
    rows, _ = acceptance_rows([_summary("a", 0.1, fits=[good, missing])])
    row = rows[6]
    assert row.verdict == FAIL
    assert "fit used 3 samples" in row.value


def test_experimental_boundedness_is_informational():
    box = _summary("box", 0.1, geometry="cart3d", boundedness_variation=0.5, boundedness_experimental=True)
    row = acceptance_rows([box])[0][4]
    assert row.verdict == SKIPPED
    assert "informational" in row.note


def test_unstable_strong_constant_fails_refinement():
    rows, _ = acceptance_rows([_summary("coarse", 0.1), _summary("fine", 0.05, strong_constant=12.0)])
    assert _verdicts(rows)[11] == FAIL


# ---------------------------------------------------------------------------
# Consolidated files
# ---------------------------------------------------------------------------

def test_report_needs_run_directories(tmp_path):
    with pytest.raises(ConfigurationError):
        write_report([], tmp_path / "report")


def test_report_lists_missing_artifacts(tmp_path):
    run_dir = tmp_path / "run-a"
    run_dir.mkdir()
    write_json(run_dir / "summary.json", _summary("run-a", 0.1))
    write_json(
        run_dir / "manifest.json",
        Manifest(
            name="run-a", config_path="a.ini", config_hash="h", geometry="radial",
            power=3.0, resolution=0.1, cells=101, versions={},
            artifacts=[ArtifactRecord(path="energy.csv", sha256="0", config_hash="h")],
        ),
    )

    report = write_report([run_dir], tmp_path / "report")
    assert report.passed
    assert [s.name for s in report.runs] == ["run-a"]
    assert report.missing == [str(run_dir / "energy.csv")]

    stored = read_json(tmp_path / "report" / "report.json")
    assert stored["passed"] is True
    markdown = (tmp_path / "report" / "report.md").read_text()
    assert "| run-a | radial |" in markdown
    assert "## Missing artifacts" in markdown


def test_report_flags_config_hash_mismatch(tmp_path):
    run_dir = tmp_path / "run-b"
    run_dir.mkdir()
    (run_dir / "energy.csv").write_text("# config_hash=other\n")
    write_json(run_dir / "summary.json", _summary("run-b", 0.1))
    write_json(
        run_dir / "manifest.json",
        Manifest(
            name="run-b", config_path="b.ini", config_hash="h", geometry="radial",
            power=3.0, resolution=0.1, cells=101, versions={},
            artifacts=[ArtifactRecord(path="energy.csv", sha256="0", config_hash="other")],
        ),
    )
    report = write_report([run_dir], tmp_path / "out")
    assert any("config hash mismatch" in m for m in report.missing)
