"""Body-relative feature encoding and window extraction.

Pipeline: resample -> head-referenced pose (BR) -> first difference (BRV)
-> second difference (BRA).  The HMD position and yaw are consumed by the
re-referencing, leaving an 18-wide row::

    left pos(3), left rot(4), right pos(3), right rot(4), hmd pitch/roll rot(4)
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, InsufficientLengthError, ParseError
from .motion_data import HMD, LEFT, RIGHT, RawSequence, resample

FEATURE_DIM = 18
ENCODINGS = ("BR", "BRV", "BRA")
FEATURE_NAMES = tuple(
    [f"lc_{c}" for c in ("px", "py", "pz", "rx", "ry", "rz", "rw")]
    + [f"rc_{c}" for c in ("px", "py", "pz", "rx", "ry", "rz", "rw")]
    + [f"hmd_{c}" for c in ("rx", "ry", "rz", "rw")]
)
# quaternion column groups inside a BR row
BR_QUAT_SLICES = (slice(3, 7), slice(10, 14), slice(14, 18))
BR_POSITION_COLUMNS = (0, 1, 2, 7, 8, 9)

DEGENERATE_FORWARD = 1e-6


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    user_id: str
    session_id: str
    fps: float
    rows: np.ndarray
    encoding_tag: str = "BRA"

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.ndim != 2:
            raise DataError(f"feature rows must be 2-D, got shape {rows.shape}")
        if self.encoding_tag not in ENCODINGS:
            raise DataError(f"unknown encoding {self.encoding_tag!r}")
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    def slice(self, start: int, stop: int) -> "FeatureSequence":
        return FeatureSequence(self.user_id, self.session_id, self.fps,
                               self.rows[start:stop], self.encoding_tag)


@dataclass(frozen=True, eq=False)
class FeatureWindow:
    user_id: str
    offset: int
    values: np.ndarray


# ----------------------------------------------------------------------------
# quaternion helpers, (x, y, z, w) layout, vectorized over leading axes


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bx, by, bz, bw = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ], axis=-1)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u, w = q[..., :3], q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def yaw_quaternion(angle: np.ndarray) -> np.ndarray:
    """Rotation by ``angle`` radians about the vertical (y) axis."""
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    zeros = np.zeros_like(half)
    return np.stack([zeros, np.sin(half), zeros, np.cos(half)], axis=-1)


def hmd_yaw(hmd_rot: np.ndarray) -> np.ndarray:
    """Heading of the HMD forward (+z) axis projected on the horizontal plane.

    Frames whose forward axis is (nearly) vertical reuse the previous yaw; a
    degenerate first frame gets yaw 0.
    """
    fwd = quat_rotate(hmd_rot, np.array([0.0, 0.0, 1.0]))
    horizontal = np.hypot(fwd[:, 0], fwd[:, 2])
    yaw = np.arctan2(fwd[:, 0], fwd[:, 2])
    ok = horizontal > DEGENERATE_FORWARD
    if not ok.all():
        # forward-fill the last valid yaw
        idx = np.where(ok, np.arange(len(yaw)), -1)
        np.maximum.accumulate(idx, out=idx)
        yaw = np.where(idx >= 0, yaw[np.maximum(idx, 0)], 0.0)
    return yaw


def canonicalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Pick quaternion signs so consecutive frames have non-negative dot product.

    The first frame is put on the ``w >= 0`` hemisphere so the result does not
    depend on the sign the input happened to carry.
    """
    q = np.asarray(q, dtype=np.float64)
    if len(q) == 0:
        return q.copy()
    dots = np.einsum("ij,ij->i", q[1:], q[:-1])
    flips = np.concatenate([[q[0, 3] < 0], dots < 0]).astype(np.int64)
    sign = np.where(np.cumsum(flips) % 2 == 1, -1.0, 1.0)
    return q * sign[:, None]


def canonicalize_rows(rows: np.ndarray) -> np.ndarray:
    out = np.array(rows, dtype=np.float64, copy=True)
    for sl in BR_QUAT_SLICES:
        out[:, sl] = canonicalize_quaternions(out[:, sl])
    return out


# ----------------------------------------------------------------------------
# encodings


def to_body_relative(seq: RawSequence) -> FeatureSequence:
    f = seq.features
    hmd_pos, hmd_rot = f[:, HMD:HMD + 3], f[:, HMD + 3:HMD + 7]
    inv_yaw = quat_conjugate(yaw_quaternion(hmd_yaw(hmd_rot)))
    parts = []
    for off in (LEFT, RIGHT):
        pos = quat_rotate(inv_yaw, f[:, off:off + 3] - hmd_pos)
        rot = quat_multiply(inv_yaw, f[:, off + 3:off + 7])
        parts += [pos, rot]
    parts.append(quat_multiply(inv_yaw, hmd_rot))
    rows = canonicalize_rows(np.concatenate(parts, axis=1).reshape(len(f), FEATURE_DIM))
    return FeatureSequence(seq.user_id, seq.session_id, seq.fps, rows, "BR")


def differentiate(seq: FeatureSequence) -> FeatureSequence:
    """Frame-to-frame deltas; BR -> BRV -> BRA."""
    if len(seq) < 2:
        raise InsufficientLengthError(
            f"differencing needs at least 2 frames, got {len(seq)}", required=2, available=len(seq))
    if seq.encoding_tag == "BRA":
        raise DataError("BRA is the last encoding stage; nothing to differentiate")
    rows = seq.rows
    if seq.encoding_tag == "BR" and seq.width == FEATURE_DIM:
        rows = canonicalize_rows(rows)
    tag = ENCODINGS[ENCODINGS.index(seq.encoding_tag) + 1]
    return FeatureSequence(seq.user_id, seq.session_id, seq.fps, np.diff(rows, axis=0), tag)


def encode_bra(seq: RawSequence, target_fps: float = 15.0) -> FeatureSequence:
    return differentiate(differentiate(to_body_relative(resample(seq, target_fps))))


# ----------------------------------------------------------------------------
# windows


def window_count(length: int, window_len: int, stride: int) -> int:
    if window_len < 1 or stride < 1:
        raise DataError("window_len and stride must be >= 1")
    if length < window_len:
        return 0
    return (length - window_len) // stride + 1


def window_offsets(length: int, window_len: int, stride: int = 1) -> np.ndarray:
    return np.arange(window_count(length, window_len, stride), dtype=np.int64) * stride


def window_array(rows: np.ndarray, offsets: np.ndarray, window_len: int) -> np.ndarray:
    """Stack windows starting at ``offsets`` into a ``(B, window_len, D)`` array."""
    view = sliding_window_view(rows, window_len, axis=0)  # (L-W+1, D, W)
    return np.ascontiguousarray(view[np.asarray(offsets)].transpose(0, 2, 1))


def extract_windows(seq: FeatureSequence, window_len: int, stride: int = 1) -> list[FeatureWindow]:
    offsets = window_offsets(len(seq), window_len, stride)
    if not len(offsets):
        return []
    values = window_array(seq.rows, offsets, window_len)
    return [FeatureWindow(seq.user_id, int(o), v) for o, v in zip(offsets, values)]


# ----------------------------------------------------------------------------
# standardization


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int = FEATURE_DIM) -> "FeatureStats":
        return cls(np.zeros(dim), np.ones(dim))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)


def compute_stats(seqs: list[FeatureSequence], min_std: float = 1e-8) -> FeatureStats:
    """Per-feature mean/std over all rows of the given (training) sequences."""
    rows = np.concatenate([s.rows for s in seqs], axis=0)
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > min_std, std, 1.0)
    return FeatureStats(mean.astype(np.float32).astype(np.float64),
                        std.astype(np.float32).astype(np.float64))


# ----------------------------------------------------------------------------
# feature dump


def serialize_features(seq: FeatureSequence) -> str:
    buf = io.StringIO()
    buf.write(",".join(FEATURE_NAMES) + "\n")
    if len(seq):
        np.savetxt(buf, seq.rows, fmt="%.17g", delimiter=",")
    return buf.getvalue()


def write_features(seq: FeatureSequence, path: str | Path) -> None:
    Path(path).write_text(serialize_features(seq), encoding="utf-8")


def read_features(path: str | Path, user_id: str, session_id: str, fps: float) -> FeatureSequence:
    text = Path(path).read_text(encoding="utf-8")
    header, _, body = text.partition("\n")
    if tuple(h.strip() for h in header.split(",")) != FEATURE_NAMES:
        raise ParseError(f"{path}: unexpected feature header", 1)
    if body.strip():
        try:
            rows = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from None
    else:
        rows = np.empty((0, FEATURE_DIM))
    return FeatureSequence(user_id, session_id, fps, rows, "BRA")
