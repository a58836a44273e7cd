"""Tests for the CSV, JSON and raw snapshot artifact formats."""
import hashlib

import numpy as np
import pytest

from model import CartesianGrid3, ConfigurationError, EnergyReport, FieldSnapshot, Frame, RadialGrid
from io_utils import (
    encode_json,
    ensure_directory,
    read_csv,
    read_json,
    read_snapshot,
    sha256_file,
    write_csv,
    write_json,
    write_snapshot,
)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def test_csv_header_and_exact_values(tmp_path):
    t = np.array([1.0, 2.0, 3.0])
    e = np.array([0.1, 1.0 / 3.0, np.pi])
    path = write_csv(tmp_path / "energy.csv", ["time", "total"], [t, e], "abc123")

    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc123"
    assert lines[1] == "# time,total"

    meta, names, data = read_csv(path)
    assert meta == {"config_hash": "abc123"}
    assert names == ["time", "total"]
    assert data.shape == (3, 2)
    np.testing.assert_array_equal(data[:, 1], e)


def test_csv_single_row(tmp_path):
    path = write_csv(tmp_path / "one.csv", ["a", "b"], [[1.5], [2.5]], "h")
    _, _, data = read_csv(path)
    assert data.shape == (1, 2)


def test_csv_column_count_mismatch(tmp_path):
    with pytest.raises(ConfigurationError, match="column names"):
        write_csv(tmp_path / "bad.csv", ["a", "b", "c"], [[1.0], [2.0]], "h")


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def test_encode_json_sorted_with_newline():
    raw = encode_json({"b": 1, "a": 2})
    assert raw.endswith(b"\n")
    assert raw.index(b'"a"') < raw.index(b'"b"')


def test_json_typed_read_back(tmp_path):
    report = EnergyReport(time=2.0, kinetic=0.5, gradient=0.25, potential=0.125, total=0.875, frame="physical")
    path = write_json(tmp_path / "energy.json", report)
    assert read_json(path, EnergyReport) == report
    assert read_json(path)["total"] == 0.875


def test_sha256_file(tmp_path):
    path = tmp_path / "blob"
    path.write_bytes(b"wave" * 1000)
    assert sha256_file(path) == hashlib.sha256(b"wave" * 1000).hexdigest()


def test_ensure_directory_nested(tmp_path):
    target = ensure_directory(tmp_path / "a" / "b")
    assert target.is_dir()
    assert ensure_directory(target) == target


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def test_radial_snapshot_with_dotted_stem(tmp_path):
    grid = RadialGrid(2.0, 11)
    values = np.linspace(0.0, 1.0, 11) ** 2
    dvalues = -values
    mask = np.arange(11) < 7
    snap = FieldSnapshot(Frame.COMPACTIFIED, -0.25, grid, values, dvalues, mask)

    hdr, binary = write_snapshot(tmp_path / "physical_t4.000000", snap, "deadbeef")
    assert hdr.name == "physical_t4.000000.hdr"
    assert binary.name == "physical_t4.000000.bin"
    assert binary.stat().st_size == 3 * 11 * 8
    assert "config_hash=deadbeef" in hdr.read_text()

    back = read_snapshot(tmp_path / "physical_t4.000000")
    assert back.frame is Frame.COMPACTIFIED
    assert back.time == -0.25
    assert back.grid == grid
    np.testing.assert_array_equal(back.values, values)
    np.testing.assert_array_equal(back.dvalues, dvalues)
    assert back.mask.dtype == bool
    np.testing.assert_array_equal(back.mask, mask)


def test_cartesian_snapshot_keeps_axis_order(tmp_path):
    grid = CartesianGrid3(1.0, 4)
    values = np.arange(64, dtype=float).reshape(4, 4, 4)
    snap = FieldSnapshot(Frame.PHYSICAL, 1.5, grid, values, 2.0 * values, values > 10.0)

    write_snapshot(tmp_path / "cube", snap, "h")
    raw = np.fromfile(tmp_path / "cube.bin", dtype="<f8")
    # x fastest: the second stored value is values[1, 0, 0]
    assert raw[1] == values[1, 0, 0]

    back = read_snapshot(tmp_path / "cube")
    np.testing.assert_array_equal(back.values, values)
    np.testing.assert_array_equal(back.mask, values > 10.0)


def test_snapshot_unknown_format(tmp_path):
    (tmp_path / "x.hdr").write_text("format=other\n")
    with pytest.raises(ConfigurationError, match="unknown snapshot format"):
        read_snapshot(tmp_path / "x")


def test_snapshot_truncated_binary(tmp_path):
    grid = RadialGrid(1.0, 5)
    snap = FieldSnapshot(Frame.PHYSICAL, 1.0, grid, np.ones(5), np.zeros(5), np.ones(5, dtype=bool))
    _, binary = write_snapshot(tmp_path / "s", snap, "h")
    binary.write_bytes(binary.read_bytes()[:-8])
    with pytest.raises(ConfigurationError, match="header implies"):
        read_snapshot(tmp_path / "s")
