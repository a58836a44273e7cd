import hashlib
import logging
import os
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import msgspec
import numpy as np

from model import CartesianGrid3, ConfigurationError, FieldSnapshot, Frame, RadialGrid

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "wavelab-snapshot-1"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_csv(path, names: Sequence[str], columns: Sequence, config_hash: str) -> Path:
    """Comma separated columns, %.17g, with a two-line commented header."""
    path = Path(path)
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns]) if columns else np.empty((0, len(names)))
    if data.ndim == 1:
        data = data[None, :]
    if data.shape[1] != len(names):
        raise ConfigurationError(f"{path.name}: {len(names)} column names for {data.shape[1]} columns")
    header = f"config_hash={config_hash}\n" + ",".join(names)
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=header, comments="# ")
    logger.debug(f"Wrote {path} ({data.shape[0]} rows)")
    return path


def read_csv(path) -> Tuple[Dict[str, str], List[str], np.ndarray]:
    """Returns (header fields, column names, data)."""
    meta, names = {}, []
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body and not names:
                key, value = body.split("=", 1)
                meta[key] = value
            else:
                names = body.split(",")
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return meta, names, data


def _encode_numpy(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise NotImplementedError(f"cannot encode {type(obj).__name__} as JSON")


_ENCODER = msgspec.json.Encoder(enc_hook=_encode_numpy, order="sorted")


def encode_json(obj) -> bytes:
    return msgspec.json.format(_ENCODER.encode(obj), indent=2) + b"\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_bytes(encode_json(obj))
    logger.debug(f"Wrote {path}")
    return path


def read_json(path, type=None):
    raw = Path(path).read_bytes()
    return msgspec.json.decode(raw, type=type) if type is not None else msgspec.json.decode(raw)


def _sibling(stem: Path, ext: str) -> Path:
    # stems may contain dots, e.g. physical_t4.000000
    return stem.parent / f"{stem.name}{ext}"


def _grid_header(grid) -> Dict[str, str]:
    if isinstance(grid, RadialGrid):
        return {"grid": "radial", "r_max": repr(grid.r_max), "n_r": str(grid.n_r)}
    return {"grid": "cart3d", "half_width": repr(grid.half_width), "n": str(grid.n)}


def write_snapshot(stem, snapshot: FieldSnapshot, config_hash: str) -> Tuple[Path, Path]:
    """<stem>.hdr key=value text plus <stem>.bin: value, dvalue, mask blocks of little-endian float64, x fastest."""
    stem = Path(stem)
    header = {
        "format": SNAPSHOT_FORMAT,
        "frame": str(snapshot.frame),
        "time": repr(snapshot.time),
        **_grid_header(snapshot.grid),
        "dtype": "<f8",
        "order": "x-fastest",
        "blocks": "value,dvalue,mask",
        "config_hash": config_hash,
    }
    hdr = _sibling(stem, ".hdr")
    binary = _sibling(stem, ".bin")
    hdr.write_text("".join(f"{k}={v}\n" for k, v in header.items()))
    with open(binary, "wb") as fh:
        for block in (snapshot.values, snapshot.dvalues, snapshot.mask.astype(float)):
            fh.write(np.asarray(block, dtype="<f8").ravel(order="F").tobytes())
    return hdr, binary


def read_snapshot(stem) -> FieldSnapshot:
    stem = Path(stem)
    header = {}
    for line in _sibling(stem, ".hdr").read_text().splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    if header.get("format") != SNAPSHOT_FORMAT:
        raise ConfigurationError(f"{stem}: unknown snapshot format {header.get('format')!r}")
    if header["grid"] == "radial":
        grid = RadialGrid(float(header["r_max"]), int(header["n_r"]))
        shape = (grid.n_r,)
    else:
        grid = CartesianGrid3(float(header["half_width"]), int(header["n"]))
        shape = (grid.n,) * 3
    size = int(np.prod(shape))
    raw = np.fromfile(_sibling(stem, ".bin"), dtype="<f8")
    if raw.size != 3 * size:
        raise ConfigurationError(f"{stem}.bin holds {raw.size} values, header implies {3 * size}")
    blocks = [raw[k * size:(k + 1) * size].reshape(shape, order="F") for k in range(3)]
    return FieldSnapshot(Frame(header["frame"]), float(header["time"]), grid, blocks[0], blocks[1], blocks[2] != 0.0)


def ensure_directory(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
