"""File formats: the OCTB voxel container, cohort CSV and report writers.

OCTB layout::

    b"OCTB" | header_len (uint32 LE) | header (UTF-8 JSON) | payload

The header carries ``kind`` ("volume", "mask" or "map"), ``dims``,
``spacing_um`` ([axial, lateral, bscan]), ``laterality`` and ``dtype``
("u8", "u16", "f32").  The payload is little-endian, B-major, then Z, then X.
Headers are serialised with sorted keys and no whitespace so equal objects
always produce identical bytes.

Every writer goes through :func:`atomic_write`: data lands in a temporary
file next to the target and is renamed over it.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .core import N_CLASSES, LabelMask, StudyRecord, Volume3D, VoxelSpacing
from .errors import (
    BadMagic,
    CohortParse,
    HeaderParse,
    IllegalLabelValue,
    IoFailure,
    TruncatedPayload,
    ValidationError,
)
from .thickness import SECTORS, EtdrsSummary, ThicknessMap

MAGIC = b"OCTB"
_DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2"), "f32": np.dtype("<f4")}
_SCALE = {"u8": 255.0, "u16": 65535.0}
COHORT_COLUMNS = ("subject_id", "group", "age", "gender", "duration", "va_logmar")

PathLike = Union[str, os.PathLike]


def atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ValidationError(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


# -- OCTB ---------------------------------------------------------------------

def _pack(header: dict, payload: bytes) -> bytes:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hdr)) + hdr + payload


def encode_octb(obj) -> bytes:
    """Serialise a Volume3D, LabelMask, or a ThicknessMap (or list of them)."""
    if isinstance(obj, Volume3D):
        dtype = obj.source_dtype
        if dtype in _SCALE:
            arr = np.rint(np.clip(obj.voxels.astype(np.float64), 0.0, 1.0) * _SCALE[dtype])
        else:
            arr = obj.voxels
        header = {
            "kind": "volume",
            "dims": list(obj.dims),
            "spacing_um": obj.spacing.as_list(),
            "laterality": obj.laterality,
            "dtype": dtype,
        }
        if obj.field_of_view_mm != (6.0, 6.0):
            header["field_of_view_mm"] = list(obj.field_of_view_mm)
        return _pack(header, np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    if isinstance(obj, LabelMask):
        header = {
            "kind": "mask",
            "dims": list(obj.dims),
            "spacing_um": obj.spacing.as_list(),
            "laterality": obj.laterality,
            "dtype": "u8",
        }
        if obj.field_of_view_mm != (6.0, 6.0):
            header["field_of_view_mm"] = list(obj.field_of_view_mm)
        return _pack(header, np.ascontiguousarray(obj.labels, dtype="<u1").tobytes())
    maps = [obj] if isinstance(obj, ThicknessMap) else list(obj)
    if maps and all(isinstance(m, ThicknessMap) for m in maps):
        shape = maps[0].values.shape
        if any(m.values.shape != shape for m in maps):
            raise ValidationError("all maps in one file must share a shape")
        stack = np.stack([m.values for m in maps]).astype("<f4")
        header = {
            "kind": "map",
            "dims": [len(maps), shape[0], shape[1]],
            "laterality": maps[0].laterality,
            "dtype": "f32",
            "field_of_view_mm": list(maps[0].field_of_view_mm),
            "names": [m.name for m in maps],
            "semantics": [m.semantics for m in maps],
            "units": [m.units for m in maps],
        }
        return _pack(header, np.ascontiguousarray(stack).tobytes())
    raise ValidationError(f"cannot encode object of type {type(obj).__name__}")


def write_octb(obj, path: PathLike) -> None:
    atomic_write(path, encode_octb(obj))


def decode_octb(data: bytes, source: str = "<bytes>"):
    if len(data) < 8 or data[:4] != MAGIC:
        raise BadMagic(f"{source}: magic {data[:4]!r} is not {MAGIC!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise HeaderParse(f"{source}: header length {hlen} exceeds file size")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
        kind = header["kind"]
        dims = tuple(int(d) for d in header["dims"])
        dtype = header["dtype"]
        laterality = header["laterality"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise HeaderParse(f"{source}: bad header: {exc}") from exc
    if kind not in ("volume", "mask", "map") or dtype not in _DTYPES or len(dims) != 3:
        raise HeaderParse(f"{source}: unsupported header {header}")
    if any(d < 0 for d in dims):
        raise HeaderParse(f"{source}: negative dims {dims}")
    dt = _DTYPES[dtype]
    payload = data[8 + hlen:]
    expected = dims[0] * dims[1] * dims[2] * dt.itemsize
    if len(payload) < expected:
        raise TruncatedPayload(f"{source}: payload {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise TruncatedPayload(f"{source}: payload {len(payload)} bytes exceeds expected {expected}")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims)
    fov = tuple(header.get("field_of_view_mm", (6.0, 6.0)))

    if kind == "map":
        names = header.get("names", [""] * dims[0])
        sem = header.get("semantics", ["mean"] * dims[0])
        units = header.get("units", [""] * dims[0])
        return [
            ThicknessMap(arr[i].astype(np.float64), sem[i], names[i], laterality, fov, units[i])
            for i in range(dims[0])
        ]
    try:
        spacing = VoxelSpacing(*header["spacing_um"])
    except (KeyError, TypeError) as exc:
        raise HeaderParse(f"{source}: bad spacing: {exc}") from exc
    if kind == "mask":
        if dtype != "u8":
            raise HeaderParse(f"{source}: masks must be u8, got {dtype}")
        if arr.size and int(arr.max()) >= N_CLASSES:
            raise IllegalLabelValue(f"{source}: label value {int(arr.max())} outside 0..{N_CLASSES - 1}")
        return LabelMask(arr, spacing, laterality, fov)
    if dtype in _SCALE:
        vox = (arr.astype(np.float64) / _SCALE[dtype]).astype(np.float32)
    else:
        vox = arr
    return Volume3D(vox, spacing, laterality, fov, dtype)


def read_octb(path: PathLike):
    """Read a volume, a mask, or a list of maps according to the header kind."""
    return decode_octb(_read_bytes(path), str(path))


# -- cohort CSV ---------------------------------------------------------------

def read_cohort(path: PathLike) -> list[StudyRecord]:
    text = _read_bytes(path).decode("utf-8-sig")
    reader = csv.DictReader(_io.StringIO(text))
    if reader.fieldnames is None or tuple(h.strip() for h in reader.fieldnames) != COHORT_COLUMNS:
        raise CohortParse(f"{path}: header must be {','.join(COHORT_COLUMNS)}, got {reader.fieldnames}")
    records, seen = [], set()
    for lineno, row in enumerate(reader, start=2):
        row = {k.strip(): (v or "").strip() for k, v in row.items()}
        sid = row["subject_id"]
        if not sid:
            raise CohortParse(f"{path}:{lineno}: empty subject_id")
        if sid in seen:
            raise CohortParse(f"{path}:{lineno}: duplicate subject_id {sid!r}")
        seen.add(sid)
        try:
            group, gender = int(row["group"]), int(row["gender"])
            age, dur, va = float(row["age"]), float(row["duration"]), float(row["va_logmar"])
        except ValueError as exc:
            raise CohortParse(f"{path}:{lineno}: {exc}") from exc
        try:
            records.append(StudyRecord(sid, group, age, gender, dur, va))
        except ValidationError as exc:
            raise CohortParse(f"{path}:{lineno}: {exc}") from exc
    return records


def write_cohort(records: Iterable[StudyRecord], path: PathLike) -> None:
    rows = [
        [r.subject_id, r.group, _fmt(r.age), r.gender, _fmt(r.diabetes_duration), _fmt(r.visual_acuity)]
        for r in records
    ]
    atomic_write(path, _csv_bytes(COHORT_COLUMNS, rows))


# -- reports ------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "NA"
        return repr(float(v))
    return str(v)


def _csv_bytes(columns, rows) -> bytes:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_rows_csv(rows: list[dict], columns, path: PathLike) -> None:
    atomic_write(path, _csv_bytes(columns, [[r.get(c) for c in columns] for r in rows]))


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    return obj


def json_bytes(obj) -> bytes:
    return (json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n").encode("utf-8")


def write_json(obj, path: PathLike) -> None:
    atomic_write(path, json_bytes(obj))


def read_json(path: PathLike):
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


def read_etdrs_dir(directory: PathLike) -> list[EtdrsSummary]:
    """Load every ETDRS summary JSON (object or list) in a directory.

    Summaries without a ``subject_id`` key take it from the file name, up to
    the first dot.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"not a directory: {directory}")
    out = []
    for p in sorted(directory.glob("*.json")):
        data = read_json(p)
        items = data if isinstance(data, list) else [data]
        for d in items:
            if not isinstance(d, dict) or "sectors" not in d:
                continue
            s = EtdrsSummary.from_json(d)
            if s.subject_id is None:
                s = EtdrsSummary(**{**s.__dict__, "subject_id": p.name.split(".")[0]})
            out.append(s)
    return out


# -- ETDRS SVG ----------------------------------------------------------------

_SVG_SIZE = 440
_PX_PER_MM = 65.0
# label anchor angle (degrees, counter-clockwise from +x) for each quadrant
_QUADRANT_ANGLE = {"S": 90.0, "I": 270.0, "left": 180.0, "right": 0.0}


def _sector_anchor(name: str, laterality: str) -> tuple[float, float]:
    if name == "CS":
        return 0.0, 0.0
    ring_r = 1.0 if name[1] == "I" else 2.25
    q = name[0]
    if q in ("S", "I"):
        ang = _QUADRANT_ANGLE[q]
    else:
        nasal_left = laterality == "OD"
        on_left = (q == "N") == nasal_left
        ang = _QUADRANT_ANGLE["left" if on_left else "right"]
    rad = math.radians(ang)
    return ring_r * math.cos(rad), ring_r * math.sin(rad)


def etdrs_svg(summary: EtdrsSummary, decimals: int = 1) -> str:
    """Static ETDRS diagram with one label and value per sector."""
    c = _SVG_SIZE / 2
    k = _PX_PER_MM
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_SIZE}" height="{_SVG_SIZE}" '
        f'viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}" font-family="sans-serif" text-anchor="middle">',
        f'<title>ETDRS {summary.layer} {summary.laterality} ({summary.aggregation})</title>',
        f'<rect width="{_SVG_SIZE}" height="{_SVG_SIZE}" fill="white"/>',
    ]
    for r in (3.0, 1.5, 0.5):
        parts.append(f'<circle cx="{c:.1f}" cy="{c:.1f}" r="{r * k:.1f}" fill="none" stroke="black" stroke-width="1.5"/>')
    for deg in (45, 135, 225, 315):
        a = math.radians(deg)
        x0, y0 = c + 0.5 * k * math.cos(a), c - 0.5 * k * math.sin(a)
        x1, y1 = c + 3.0 * k * math.cos(a), c - 3.0 * k * math.sin(a)
        parts.append(f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" y2="{y1:.1f}" stroke="black" stroke-width="1"/>')
    for i, name in enumerate(SECTORS, start=1):
        ax, ay = _sector_anchor(name, summary.laterality)
        x, y = c + ax * k, c - ay * k
        v = summary.sectors.get(name)
        text = "NA" if v is None else f"{v:.{decimals}f}"
        cls = ' fill="gray"' if name == "CS" and summary.cs_excluded else ""
        parts.append(f'<text x="{x:.1f}" y="{y - 4:.1f}" font-size="11" data-sector="{name}">{i}-{name}</text>')
        parts.append(f'<text x="{x:.1f}" y="{y + 10:.1f}" font-size="11"{cls} data-value="{name}">{text}</text>')
    parts.append(
        f'<text x="{c:.1f}" y="{_SVG_SIZE - 8}" font-size="12">{summary.layer} {summary.laterality}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_etdrs_svg(summary: EtdrsSummary, path: PathLike) -> None:
    atomic_write(path, etdrs_svg(summary).encode("utf-8"))
