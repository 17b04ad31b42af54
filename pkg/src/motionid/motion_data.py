"""Raw tracking recordings: parsing, validation and rate reduction.

A recording holds one pose per tracked device (HMD, left and right
controller) per frame.  Each pose is a position (meters, y up) and a unit
quaternion stored as (x, y, z, w), so a frame carries 21 scalar features.

Internally a :class:`RawSequence` keeps two numpy arrays (timestamps and an
``(N, 21)`` feature matrix) and builds :class:`RawFrame` views on demand.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, TextIO

import numpy as np

from .errors import ParseError, UnsupportedRateError, ValidationError

JOINTS = ("hmd", "left", "right")
POSE_FIELDS = ("pos_x", "pos_y", "pos_z", "rot_x", "rot_y", "rot_z", "rot_w")
FEATURE_COLUMNS = tuple(f"{j}_{f}" for j in JOINTS for f in POSE_FIELDS)
COLUMNS = ("timestamp",) + FEATURE_COLUMNS
NUM_FEATURES = len(FEATURE_COLUMNS)  # 21

# column offsets of each joint's block inside the 21-wide feature matrix
HMD, LEFT, RIGHT = 0, 7, 14
QUAT_SLICES = tuple(slice(o + 3, o + 7) for o in (HMD, LEFT, RIGHT))

RENORM_TOLERANCE = 1e-3
ZERO_NORM = 1e-9


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]  # x, y, z, w


@dataclass(frozen=True)
class RawFrame:
    timestamp: float
    hmd: Pose
    controller_left: Pose
    controller_right: Pose

    def features(self) -> np.ndarray:
        out = []
        for pose in (self.hmd, self.controller_left, self.controller_right):
            out.extend(pose.position)
            out.extend(pose.orientation)
        return np.asarray(out, dtype=np.float64)


def _pose(row: np.ndarray, offset: int) -> Pose:
    p = row[offset:offset + 3]
    q = row[offset + 3:offset + 7]
    return Pose((float(p[0]), float(p[1]), float(p[2])),
                (float(q[0]), float(q[1]), float(q[2]), float(q[3])))


@dataclass(frozen=True, eq=False)
class RawSequence:
    """Timestamped absolute poses of one user session.

    ``quat_deviation`` optionally records, per frame, the largest
    ``| |q| - 1 |`` seen before quaternions were re-normalized on ingest.
    """

    user_id: str
    session_id: str
    fps: float
    timestamps: np.ndarray
    features: np.ndarray
    quat_deviation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != NUM_FEATURES:
            raise ValidationError(f"expected (N, {NUM_FEATURES}) features, got {feats.shape}")
        if len(ts) != len(feats):
            raise ValidationError("timestamps and features differ in length")
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        ts.flags.writeable = False
        feats.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.features)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RawSequence):
            return NotImplemented
        return (self.user_id == other.user_id and self.session_id == other.session_id
                and self.fps == other.fps
                and np.array_equal(self.timestamps, other.timestamps, equal_nan=True)
                and np.array_equal(self.features, other.features, equal_nan=True))

    def frame(self, i: int) -> RawFrame:
        row = self.features[i]
        return RawFrame(float(self.timestamps[i]), _pose(row, HMD), _pose(row, LEFT), _pose(row, RIGHT))

    @property
    def frames(self) -> list[RawFrame]:
        return [self.frame(i) for i in range(len(self))]

    def __iter__(self) -> Iterator[RawFrame]:
        for i in range(len(self)):
            yield self.frame(i)

    @classmethod
    def from_frames(cls, frames: list[RawFrame], user_id: str = "", session_id: str = "",
                    fps: float = 90.0) -> "RawSequence":
        ts = np.array([f.timestamp for f in frames], dtype=np.float64)
        feats = np.array([f.features() for f in frames], dtype=np.float64).reshape(-1, NUM_FEATURES)
        return cls(user_id, session_id, fps, ts, feats)


def zero_norm_frame(features: np.ndarray) -> int | None:
    """Index of the first frame holding a (near) zero-norm quaternion, if any."""
    first = None
    for sl in QUAT_SLICES:
        bad = np.flatnonzero(np.linalg.norm(features[:, sl], axis=1) <= ZERO_NORM)
        if bad.size and (first is None or bad[0] < first):
            first = int(bad[0])
    return first


def normalize_quaternions(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return features with unit quaternions and the per-frame max norm deviation."""
    out = np.array(features, dtype=np.float64, copy=True)
    bad = zero_norm_frame(out)
    if bad is not None:
        raise ValidationError(f"zero-norm quaternion at frame {bad}")
    deviation = np.zeros(len(out))
    for sl in QUAT_SLICES:
        norms = np.linalg.norm(out[:, sl], axis=1)
        with np.errstate(invalid="ignore"):
            out[:, sl] /= norms[:, None]
        deviation = np.fmax(deviation, np.abs(norms - 1.0))
    return out, deviation


# ----------------------------------------------------------------------------
# CSV input / output


def load_column_mapping(path: str | Path) -> dict[str, str]:
    """Read ``canonical_name=source_name`` lines (``#`` comments allowed)."""
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value in column mapping {path}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in COLUMNS:
            raise ParseError(f"unknown canonical column {key!r} in column mapping", lineno)
        mapping[key] = value
    return mapping


def _column_indices(header: list[str], column_map: Mapping[str, str] | None) -> list[int]:
    names = [h.strip() for h in header]
    if column_map is None and all(c in names for c in COLUMNS):
        return [names.index(c) for c in COLUMNS]
    if column_map is None and len(names) == len(COLUMNS):
        return list(range(len(COLUMNS)))
    column_map = column_map or {}
    idx = []
    for col in COLUMNS:
        src = column_map.get(col, col)
        if src not in names:
            raise ParseError(f"column {src!r} (for {col}) not found in header", 1)
        idx.append(names.index(src))
    return idx


def _scan_rows(lines: list[str], usecols: list[int], width: int) -> np.ndarray:
    """Slow path: parse line by line so errors name the offending line."""
    rows = np.empty((len(lines), len(usecols)))
    for i, fields in enumerate(csv.reader(lines)):
        lineno = i + 2
        if len(fields) != width:
            raise ParseError(f"expected {width} columns, found {len(fields)}", lineno)
        for j, c in enumerate(usecols):
            try:
                rows[i, j] = float(fields[c])
            except ValueError:
                raise ParseError(f"non-numeric value {fields[c]!r} in column {c + 1}", lineno) from None
    return rows


def read_table(source: str | bytes | TextIO, column_map: Mapping[str, str] | None = None) -> np.ndarray:
    """Parse recording CSV text into an ``(N, 22)`` array in canonical column order."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    text = source if isinstance(source, str) else source.read()
    header_end = text.find("\n")
    header_line = text if header_end < 0 else text[:header_end]
    header = next(csv.reader([header_line.strip("\r")]), [])
    if not header:
        raise ParseError("missing header row", 1)
    usecols = _column_indices(header, column_map)
    body = "" if header_end < 0 else text[header_end + 1:]
    if not body.strip():
        return np.empty((0, len(COLUMNS)))
    try:
        table = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2, dtype=np.float64)
        if table.shape[1] != len(header):
            raise ValueError("column count")
        table = table[:, usecols]
    except ValueError:
        lines = [ln for ln in body.splitlines()]
        while lines and not lines[-1].strip():
            lines.pop()
        table = _scan_rows(lines, usecols, len(header))
    return table


def parse_recording(source: str | bytes | TextIO, user_id: str, session_id: str,
                    fps: float = 90.0, column_map: Mapping[str, str] | None = None) -> RawSequence:
    """Parse a canonical recording CSV into a validated :class:`RawSequence`.

    Quaternions are re-normalized; the pre-normalization deviation is kept so
    :func:`validate_sequence` can report large ones.
    """
    table = read_table(source, column_map)
    ts, feats = table[:, 0], table[:, 1:]
    finite = np.isfinite(table).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValidationError(f"non-finite value on line {bad + 2}")
    regress = np.flatnonzero(np.diff(ts) < 0)
    if regress.size:
        raise ValidationError(f"timestamp decreases on line {int(regress[0]) + 3}")
    bad = zero_norm_frame(feats)
    if bad is not None:
        raise ValidationError(f"zero-norm quaternion on line {bad + 2}")
    feats, deviation = normalize_quaternions(feats)
    return RawSequence(user_id, session_id, fps, ts, feats, quat_deviation=deviation)


def read_recording(path: str | Path, user_id: str, session_id: str, fps: float = 90.0,
                   column_map: Mapping[str, str] | None = None) -> RawSequence:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_recording(fh, user_id, session_id, fps, column_map)


def serialize_recording(seq: RawSequence) -> str:
    """Canonical CSV text; values are written with binary32 round-trip precision."""
    buf = io.StringIO()
    buf.write(",".join(COLUMNS) + "\n")
    if len(seq):
        table = np.column_stack([seq.timestamps, seq.features])
        np.savetxt(buf, table, fmt="%.9g", delimiter=",")
    return buf.getvalue()


def write_recording(seq: RawSequence, path: str | Path) -> None:
    Path(path).write_text(serialize_recording(seq), encoding="utf-8")


# ----------------------------------------------------------------------------
# rate reduction and validation


def decimation_factor(fps: float, target_fps: float) -> int:
    if not target_fps > 0 or target_fps > fps:
        raise UnsupportedRateError(f"cannot resample {fps} fps to {target_fps} fps")
    ratio = fps / target_fps
    factor = int(round(ratio))
    if abs(ratio - factor) > 1e-9:
        raise UnsupportedRateError(f"{target_fps} fps does not evenly divide {fps} fps")
    return factor


def resample(seq: RawSequence, target_fps: float) -> RawSequence:
    """Strided decimation: keep frames 0, k, 2k, ... with k = fps / target_fps."""
    if len(seq) == 0:
        raise UnsupportedRateError("cannot resample an empty sequence")
    k = decimation_factor(seq.fps, target_fps)
    dev = None if seq.quat_deviation is None else seq.quat_deviation[::k]
    return RawSequence(seq.user_id, seq.session_id, float(target_fps),
                       seq.timestamps[::k], seq.features[::k], quat_deviation=dev)


@dataclass(frozen=True)
class Finding:
    kind: str  # non_finite | timestamp_regression | quaternion_norm | gap
    frame: int
    detail: str


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.findings)

    def __bool__(self) -> bool:
        return bool(self.findings)

    def of_kind(self, kind: str) -> list[Finding]:
        return [f for f in self.findings if f.kind == kind]

    def format(self) -> str:
        return "\n".join(f"{f.kind} frame={f.frame} {f.detail}" for f in self.findings)


def validate_sequence(seq: RawSequence) -> ValidationReport:
    report = ValidationReport()
    feats, ts = seq.features, seq.timestamps
    bad_rows = np.flatnonzero(~np.isfinite(feats).all(axis=1) | ~np.isfinite(ts))
    for i in bad_rows:
        cols = [COLUMNS[0]] if not math.isfinite(ts[i]) else []
        cols += [FEATURE_COLUMNS[c] for c in np.flatnonzero(~np.isfinite(feats[i]))]
        report.findings.append(Finding("non_finite", int(i), ",".join(cols)))
    dt = np.diff(ts)
    for i in np.flatnonzero(dt < 0):
        report.findings.append(Finding("timestamp_regression", int(i) + 1,
                                       f"{ts[i]!r} -> {ts[i + 1]!r}"))
    if seq.quat_deviation is not None:
        deviation = seq.quat_deviation
    else:
        deviation = np.zeros(len(seq))
        for sl in QUAT_SLICES:
            deviation = np.fmax(deviation, np.abs(np.linalg.norm(feats[:, sl], axis=1) - 1.0))
    for i in np.flatnonzero(deviation > RENORM_TOLERANCE):
        report.findings.append(Finding("quaternion_norm", int(i), f"deviation={deviation[i]:.3g}"))
    for i in np.flatnonzero(dt > 3.0 / seq.fps):
        report.findings.append(Finding("gap", int(i) + 1, f"dt={dt[i]:.4g}s"))
    report.findings.sort(key=lambda f: (f.frame, f.kind))
    return report
