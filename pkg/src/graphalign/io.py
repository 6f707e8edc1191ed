"""Readers and writers for the binary and text exchange formats.

All binary formats are little-endian: a 4-byte magic, u32 header fields, then
the payload. Floats are stored as f32, so a read -> write cycle is byte-stable.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from pathlib import Path

import numpy as np

from .bench import SWEEP_COLUMNS, AlignmentReport, BucketMetrics
from .errors import FormatError, GeometryError
from .fusion import ImageFeatureMap
from .geometry import CalibrationRig, PointSet
from .graph import NeighborGraph
from .safa import AttentionParams

REPORT_VERSION = 1
CALIB_ORTHO_TOL = 1e-6

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


def _read_header(data: bytes, magic: bytes, n_fields: int, what: str) -> tuple[int, ...]:
    size = 4 + 4 * n_fields
    if len(data) < size or data[:4] != magic:
        raise FormatError(f"not a {what} file (bad magic or truncated header)")
    return struct.unpack(f"<{n_fields}I", data[4:size])


def _payload(data: bytes, offset: int, count: int, dtype: np.dtype, what: str) -> np.ndarray:
    end = offset + count * dtype.itemsize
    if len(data) < end:
        raise FormatError(f"{what} payload truncated: need {end} bytes, have {len(data)}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset)


def _exact_length(data: bytes, expected: int, what: str):
    if len(data) != expected:
        raise FormatError(f"{what} has {len(data) - expected:+d} unexpected trailing bytes")


# -- point cloud ---------------------------------------------------------------

def encode_points(points: PointSet) -> bytes:
    n, c = len(points), points.channels
    rows = np.empty((n, 3 + c + 1), dtype=_F32)
    rows[:, :3] = points.coords
    rows[:, 3:3 + c] = points.features
    rows[:, -1] = points.labels
    return b"GAPC" + struct.pack("<II", n, c) + rows.tobytes()


def decode_points(data: bytes) -> PointSet:
    n, c = _read_header(data, b"GAPC", 2, "GAPC point cloud")
    width = 3 + c + 1
    rows = _payload(data, 12, n * width, _F32, "GAPC").reshape(n, width).astype(np.float64)
    _exact_length(data, 12 + rows.size * 4, "GAPC")
    labels = rows[:, -1]
    if np.any(labels != np.round(labels)):
        raise FormatError("GAPC labels must be integral")
    try:
        return PointSet(rows[:, :3], rows[:, 3:3 + c], labels.astype(np.int64))
    except GeometryError as exc:
        raise FormatError(f"GAPC content invalid: {exc}") from exc


# -- feature map ---------------------------------------------------------------

def encode_feature_map(fmap: ImageFeatureMap) -> bytes:
    h, w, c = fmap.data.shape
    return b"GAFM" + struct.pack("<III", h, w, c) + fmap.data.astype(_F32).tobytes()


def decode_feature_map(data: bytes) -> ImageFeatureMap:
    h, w, c = _read_header(data, b"GAFM", 3, "GAFM feature map")
    values = _payload(data, 16, h * w * c, _F32, "GAFM")
    _exact_length(data, 16 + values.size * 4, "GAFM")
    return ImageFeatureMap(values.reshape(h, w, c).astype(np.float64))


# -- neighbor graph ------------------------------------------------------------

def encode_graph(graph: NeighborGraph) -> bytes:
    n, k = graph.indices.shape
    if n and (graph.indices.min() < 0 or graph.indices.max() > 0xFFFFFFFF):
        raise FormatError("graph indices do not fit in u32")
    return (b"GAGR" + struct.pack("<II", n, k) + graph.indices.astype(_U32).tobytes()
            + graph.valid.astype(np.uint8).tobytes())


def decode_graph(data: bytes) -> NeighborGraph:
    n, k = _read_header(data, b"GAGR", 2, "GAGR graph")
    idx = _payload(data, 12, n * k, _U32, "GAGR indices")
    flags = _payload(data, 12 + 4 * n * k, n * k, np.dtype("u1"), "GAGR validity")
    _exact_length(data, 12 + 5 * n * k, "GAGR")
    if np.any(flags > 1):
        raise FormatError("GAGR validity bytes must be 0 or 1")
    return NeighborGraph(idx.reshape(n, k).astype(np.int64), flags.reshape(n, k).astype(bool))


# -- attention params ----------------------------------------------------------

def encode_params(params: AttentionParams) -> bytes:
    return (b"GASA" + struct.pack("<II", params.channels, params.heads)
            + params.stacked().astype(_F32).tobytes())


def decode_params(data: bytes) -> AttentionParams:
    c, h = _read_header(data, b"GASA", 2, "GASA params")
    w = _payload(data, 12, 3 * c * c, _F32, "GASA")
    _exact_length(data, 12 + w.size * 4, "GASA")
    try:
        return AttentionParams.from_stacked(w.reshape(3, c, c).astype(np.float64), h)
    except ValueError as exc:
        raise FormatError(f"GASA content invalid: {exc}") from exc


# -- calibration text ----------------------------------------------------------

_CALIB_KEYS = {"INTRINSICS": 9, "ROTATION": 9, "TRANSLATION": 3, "SCALE": 1, "IMAGE": 2}


def _fmt(x: float) -> str:
    return repr(float(x))


def format_calibration(rig: CalibrationRig) -> str:
    lines = [
        "INTRINSICS: " + " ".join(_fmt(v) for v in rig.intrinsics.ravel()),
        "ROTATION: " + " ".join(_fmt(v) for v in rig.rotation.ravel()),
        "TRANSLATION: " + " ".join(_fmt(v) for v in rig.translation),
        "SCALE: " + _fmt(rig.scale),
        f"IMAGE: {rig.image_width} {rig.image_height}",
    ]
    return "\n".join(lines) + "\n"


def parse_calibration(text: str) -> CalibrationRig:
    values: dict[str, list[str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition(":")
        key = key.strip().upper()
        if not sep or key not in _CALIB_KEYS:
            raise FormatError(f"calibration line {lineno}: unknown entry {line!r}")
        if key in values:
            raise FormatError(f"calibration key {key} given twice")
        parts = rest.split()
        if len(parts) != _CALIB_KEYS[key]:
            raise FormatError(f"{key} needs {_CALIB_KEYS[key]} values, got {len(parts)}")
        values[key] = parts
    missing = [k for k in _CALIB_KEYS if k not in values]
    if missing:
        raise FormatError(f"calibration missing keys: {', '.join(missing)}")
    try:
        nums = {k: [float(v) for v in values[k]] for k in ("INTRINSICS", "ROTATION",
                                                            "TRANSLATION", "SCALE")}
        width, height = (int(v) for v in values["IMAGE"])
    except ValueError as exc:
        raise FormatError(f"calibration value is not a number: {exc}") from exc
    rot = np.array(nums["ROTATION"]).reshape(3, 3)
    if not np.all(np.isfinite(rot)) or np.max(np.abs(rot.T @ rot - np.eye(3))) > CALIB_ORTHO_TOL:
        raise FormatError("calibration rotation is not orthonormal")
    try:
        return CalibrationRig(np.array(nums["INTRINSICS"]).reshape(3, 3), rot,
                              np.array(nums["TRANSLATION"]), nums["SCALE"][0], width, height,
                              ortho_tol=CALIB_ORTHO_TOL)
    except GeometryError as exc:
        raise FormatError(f"calibration invalid: {exc}") from exc


# -- ground truth CSV ----------------------------------------------------------

def format_ground_truth(labels: np.ndarray, pixel: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "class", "px", "py"])
    for i, (lab, (px, py)) in enumerate(zip(labels, pixel)):
        w.writerow([i, int(lab), "" if math.isnan(px) else _fmt(px),
                    "" if math.isnan(py) else _fmt(py)])
    return buf.getvalue()


def parse_ground_truth(text: str) -> tuple[np.ndarray, np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["index", "class", "px", "py"]:
        raise FormatError("ground-truth CSV must start with header index,class,px,py")
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    pixel = np.full((len(rows) - 1, 2), np.nan)
    for i, row in enumerate(rows[1:]):
        if len(row) != 4 or int(row[0]) != i:
            raise FormatError(f"ground-truth row {i + 1} malformed: {row}")
        labels[i] = int(row[1])
        if row[2]:
            pixel[i] = float(row[2]), float(row[3])
    return labels, pixel


# -- reports -------------------------------------------------------------------

_METRIC_COLUMNS = ("method", "bucket", "accuracy", "cosine", "n", "n_labeled",
                   "background_accuracy")
_INT_FIELDS = {"seed", "K", "chunk", "H", "n", "n_labeled"}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt(v)
    return str(v)


def _value(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def format_report(report: AlignmentReport, include_timing: bool = True) -> str:
    out = [f"report_version: {REPORT_VERSION}", "", "[config]"]
    out += [f"{k}: {v}" for k, v in sorted(report.config.items())]
    out += ["", "[metrics]", ",".join(_METRIC_COLUMNS)]
    for b in report.buckets:
        out.append(",".join(_cell(getattr(b, col)) for col in _METRIC_COLUMNS))
    out += ["", "[surviving]", "method,n"]
    out += [f"{m},{n}" for m, n in report.surviving.items()]
    out += ["", "[complexity]"]
    out += [f"{k}: {_cell(v)}" for k, v in report.complexity.items()]
    if include_timing and report.timing_ms:
        out += ["", "[timing]", "method,stage,median_ms,min_ms,max_ms"]
        for method, stages in report.timing_ms.items():
            for stage, t in stages.items():
                out.append(",".join([method, stage, _cell(t["median_ms"]), _cell(t["min_ms"]),
                                     _cell(t["max_ms"])]))
    return "\n".join(out) + "\n"


def parse_report(text: str) -> AlignmentReport:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"report_version: {REPORT_VERSION}":
        raise FormatError(f"report must start with 'report_version: {REPORT_VERSION}'")
    sections: dict[str, list[str]] = {}
    current = None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            raise FormatError(f"report content outside a section: {line!r}")
        else:
            sections[current].append(line)
    report = AlignmentReport()
    for line in sections.get("config", []):
        k, _, v = line.partition(": ")
        report.config[k] = v
    metrics = sections.get("metrics", [])
    if metrics:
        if tuple(metrics[0].split(",")) != _METRIC_COLUMNS:
            raise FormatError("unexpected [metrics] header")
        for line in metrics[1:]:
            f = line.split(",")
            if len(f) != len(_METRIC_COLUMNS):
                raise FormatError(f"bad metrics row {line!r}")
            report.buckets.append(BucketMetrics(f[0], f[1], float(f[2]), float(f[3]), int(f[4]),
                                                int(f[5]), float(f[6])))
    for line in sections.get("surviving", [])[1:]:
        m, n = line.split(",")
        report.surviving[m] = int(n)
    for line in sections.get("complexity", []):
        k, _, v = line.partition(": ")
        report.complexity[k] = _value(v)
    for line in sections.get("timing", [])[1:]:
        m, stage, med, lo, hi = line.split(",")
        report.timing_ms.setdefault(m, {})[stage] = {
            "median_ms": float(med), "min_ms": float(lo), "max_ms": float(hi)}
    return report


def format_sweep_csv(rows: list[dict], config: dict | None = None) -> str:
    """Flat CSV; ``config`` is echoed as ``# key: value`` lines under the version."""
    buf = io.StringIO()
    buf.write(f"# report_version: {REPORT_VERSION}\n")
    for k, v in sorted((config or {}).items()):
        buf.write(f"# {k}: {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([_cell(row.get(col)) for col in SWEEP_COLUMNS])
    return buf.getvalue()


def sweep_csv_config(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines()[1:]:
        if not line.startswith("# "):
            break
        k, _, v = line[2:].partition(": ")
        out[k] = v
    return out


def parse_sweep_csv(text: str) -> list[dict]:
    lines = text.splitlines()
    if not lines or lines[0] != f"# report_version: {REPORT_VERSION}":
        raise FormatError("sweep CSV must start with '# report_version: 1'")
    body = lines[1:]
    while body and body[0].startswith("#"):
        body = body[1:]
    reader = csv.reader(body)
    header = next(reader, None)
    if header is None or tuple(header) != SWEEP_COLUMNS:
        raise FormatError("unexpected sweep CSV header")
    rows = []
    for rec in reader:
        if len(rec) != len(SWEEP_COLUMNS):
            raise FormatError(f"bad sweep row {rec}")
        row = {}
        for col, text_value in zip(SWEEP_COLUMNS, rec):
            if col in ("method", "bucket"):
                row[col] = text_value
            elif col in _INT_FIELDS:
                row[col] = int(text_value)
            else:
                row[col] = None if text_value == "" else float(text_value)
        rows.append(row)
    return rows


# -- path helpers --------------------------------------------------------------

def write_bytes(path, data: bytes):
    Path(path).write_bytes(data)


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()
