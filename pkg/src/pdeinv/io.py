"""Field files, CSV logs, PGM slices and key=value run configurations.

A field is stored as two files sharing a base name:

``<base>.hdr``
    ASCII header::

        PDEINV-FIELD 1
        dims 16 16 16
        spacing 0.39269908169872414 0.39269908169872414 0.39269908169872414
        components 1
        dtype float64-le

``<base>.raw``
    Little-endian float64 values, first index fastest ("x-fastest"), with
    vector components stored one after another.

Every writer goes through a temporary file and ``os.replace``, so readers
never observe a partially written file.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .grid import TWO_PI, is_vector
from .optimizer import ConvergenceLog

MAGIC = "PDEINV-FIELD 1"
DTYPE_TAG = "float64-le"


class FieldFormatError(ValueError):
    """Base class for malformed field files."""


class BadMagicError(FieldFormatError):
    pass


class DimensionMismatchError(FieldFormatError):
    pass


class TruncatedPayloadError(FieldFormatError):
    pass


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _base(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".hdr", ".raw") else path


def field_paths(path) -> tuple[Path, Path]:
    base = _base(path)
    return base.with_name(base.name + ".hdr"), base.with_name(base.name + ".raw")


def _spacing(dims) -> tuple[float, ...]:
    return tuple(TWO_PI / n for n in dims)


def encode_header(dims, components: int) -> str:
    return "\n".join([
        MAGIC,
        "dims " + " ".join(str(int(n)) for n in dims),
        "spacing " + " ".join(repr(h) for h in _spacing(dims)),
        f"components {components}",
        f"dtype {DTYPE_TAG}",
    ]) + "\n"


def encode_payload(f: np.ndarray, vector: bool | None = None) -> bytes:
    vector = is_vector(f) if vector is None else vector
    comps = f if vector else f[None]
    return b"".join(np.asarray(c, dtype="<f8").ravel(order="F").tobytes() for c in comps)


def write_field(path, f: np.ndarray, vector: bool | None = None) -> tuple[Path, Path]:
    """Write a scalar or vector field; returns the header and payload paths.

    ``vector`` overrides shape-based detection, which is ambiguous only for
    grids with two points per axis.
    """
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("refusing to write a field with non-finite values")
    vector = is_vector(f) if vector is None else vector
    dims = tuple(f.shape[1:]) if vector else tuple(f.shape)
    comps = f.shape[0] if vector else 1
    if len(dims) not in (2, 3) or comps not in (1, len(dims)):
        raise ValueError(f"cannot store an array of shape {f.shape} as a field")
    hdr, raw = field_paths(path)
    atomic_write_bytes(raw, encode_payload(f, vector))
    atomic_write_text(hdr, encode_header(dims, comps))
    return hdr, raw


def parse_header(text: str) -> tuple[tuple[int, ...], int]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MAGIC:
        raise BadMagicError(f"not a field header (expected {MAGIC!r})")
    entries = {}
    for ln in lines[1:]:
        key, _, value = ln.partition(" ")
        entries[key] = value.split()
    try:
        dims = tuple(int(v) for v in entries["dims"])
        comps = int(entries["components"][0])
        dtype = entries["dtype"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise FieldFormatError(f"incomplete field header: {exc}") from None
    if dtype != DTYPE_TAG:
        raise FieldFormatError(f"unsupported value type {dtype!r}")
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise DimensionMismatchError(f"invalid dims {dims}")
    if comps not in (1, len(dims)):
        raise DimensionMismatchError(f"{comps} components on a {len(dims)}D grid")
    if "spacing" in entries:
        spacing = tuple(float(v) for v in entries["spacing"])
        if len(spacing) != len(dims) or not np.allclose(spacing, _spacing(dims), rtol=1e-12):
            raise DimensionMismatchError("header spacing does not match dims")
    return dims, comps


def decode_payload(data: bytes, dims, comps: int) -> np.ndarray:
    n = int(np.prod(dims))
    expected = 8 * n * comps
    if len(data) < expected:
        raise TruncatedPayloadError(f"payload has {len(data)} bytes, header requires {expected}")
    if len(data) > expected:
        raise DimensionMismatchError(f"payload has {len(data)} bytes, header requires {expected}")
    flat = np.frombuffer(data, dtype="<f8").astype(float)
    fields = [flat[c * n:(c + 1) * n].reshape(dims, order="F") for c in range(comps)]
    return fields[0].copy() if comps == 1 else np.stack(fields)


def read_field(path, expected_dims=None) -> np.ndarray:
    """Read a field written by :func:`write_field` (``path`` may name either file or the base)."""
    hdr, raw = field_paths(path)
    dims, comps = parse_header(hdr.read_text(encoding="utf-8", errors="replace"))
    if expected_dims is not None and tuple(expected_dims) != dims:
        raise DimensionMismatchError(f"field has dims {dims}, expected {tuple(expected_dims)}")
    return decode_payload(raw.read_bytes(), dims, comps)


LOG_COLUMNS = ("iteration", "objective", "mismatch", "grad_norm", "rel_grad_norm", "alpha",
               "eta", "pcg_iterations", "negative_curvature")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def log_to_csv(history: ConvergenceLog) -> str:
    g0 = history.records[0].grad_norm if history.records else 1.0
    rows = [(r.iteration, r.objective, r.mismatch, r.grad_norm,
             r.grad_norm / g0 if g0 > 0 else 0.0, r.alpha, r.eta, r.pcg_iterations,
             r.negative_curvature) for r in history.records]
    return _csv_text(LOG_COLUMNS, rows)


def pcg_residuals_to_csv(history: ConvergenceLog) -> str:
    rows = [(r.iteration, i, res) for r in history.records for i, res in enumerate(r.pcg_residuals)]
    return _csv_text(("iteration", "pcg_step", "residual"), rows)


def write_log(path, history: ConvergenceLog) -> tuple[Path, Path]:
    """Write the per-iteration CSV to ``path`` and PCG residuals next to it (``*_pcg.csv``)."""
    path = Path(path)
    pcg = path.with_name(path.stem + "_pcg.csv")
    atomic_write_text(path, log_to_csv(history))
    atomic_write_text(pcg, pcg_residuals_to_csv(history))
    return path, pcg


def write_table(path, header, rows) -> Path:
    return atomic_write_text(path, _csv_text(header, rows))


def read_table(path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def encode_pgm(image: np.ndarray) -> bytes:
    """8-bit binary PGM with min-max scaling; the scale is recorded in a comment."""
    image = np.asarray(image, dtype=float)
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo
    scaled = np.zeros(image.shape) if span == 0 else (image - lo) / span * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    # rows run along the second axis so the first axis is horizontal
    rows = pixels.T[::-1]
    header = f"P5\n# min={lo!r} max={hi!r}\n{rows.shape[1]} {rows.shape[0]}\n255\n"
    return header.encode("ascii") + np.ascontiguousarray(rows).tobytes()


def decode_pgm(data: bytes) -> tuple[np.ndarray, float, float]:
    """Return the pixel rows and the recorded (min, max) of a PGM written by :func:`encode_pgm`."""
    parts = data.split(b"\n", 4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    comment = parts[1].decode("ascii")[2:].split()
    lo, hi = (float(c.split("=")[1]) for c in comment)
    width, height = (int(v) for v in parts[2].split())
    pixels = np.frombuffer(parts[4], dtype=np.uint8).reshape(height, width)
    return pixels, lo, hi


SLICE_NAMES = ("sagittal", "coronal", "axial")


def center_slices(f: np.ndarray) -> dict[str, np.ndarray]:
    """Center slices normal to each axis for 3D fields; the field itself in 2D."""
    if f.ndim == 2:
        return {"slice": f}
    return {name: np.take(f, f.shape[axis] // 2, axis=axis) for axis, name in enumerate(SLICE_NAMES)}


def export_slices(f: np.ndarray, base) -> list[Path]:
    """Write ``<base>_<view>.pgm`` for every center slice of a scalar field."""
    base = Path(base)
    return [atomic_write_bytes(base.with_name(f"{base.name}_{name}.pgm"), encode_pgm(img))
            for name, img in center_slices(f).items()]


class ConfigError(ValueError):
    pass


def read_run_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use CLI flag spelling."""
    config = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key = key.strip().lstrip("-").replace("-", "_")
        if key in config:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        config[key] = value.strip()
    return config
