"""Synthetic VR motion with a per-user latent signature.

Each user gets a signature drawn once: oscillation frequencies, amplitudes,
harmonics and relative phases for every joint and axis, posture offsets of
the controllers relative to the head, and a few activity modes that rescale
the signature.  Each session adds its own time shift, small amplitude and
frequency jitter, activity switching, a global yaw/translation walk and
sensor noise.  Users listed as twins share one signature.  Optionally a set
of activity patterns common to the whole population (``shared_motion``) is
mixed in, so that short recordings confound activity with identity.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .motion_data import NUM_FEATURES, RawSequence, write_recording
from .preprocessing import quat_multiply, yaw_quaternion

COMPONENTS = 2          # sinusoids per joint axis
ACTIVITIES = 3
CROSSFADE_SECONDS = 1.0


@dataclass(frozen=True)
class SynthSpec:
    users: int = 12
    session1_minutes: float = 11.0
    session2_minutes: float = 3.0
    fps: float = 90.0
    seed: int = 0
    twins: int = 0               # the last `twins` users copy the signature of the first ones
    noise_mm: float = 0.2
    session_jitter: float = 0.05
    segment_seconds: tuple[float, float] = (5.0, 20.0)
    activity_spread: float = 0.15  # activity gains drawn from 1 +- spread
    rate_spread: float = 0.05      # activity tempo drawn from 1 +- spread
    shared_motion: float = 0.0     # amplitude of the activity patterns common to all users
    population_seed: int = 0       # seeds the common patterns, so datasets can share them

    def __post_init__(self) -> None:
        if self.users < 1:
            raise ConfigError("users must be >= 1")
        if not (self.session1_minutes > 0 and self.session2_minutes > 0 and self.fps > 0):
            raise ConfigError("session lengths and fps must be positive")
        if not 0 <= self.twins <= self.users // 2:
            raise ConfigError("twins must be between 0 and users/2")
        if self.noise_mm < 0 or self.session_jitter < 0:
            raise ConfigError("noise_mm and session_jitter must be >= 0")
        if self.shared_motion < 0:
            raise ConfigError("shared_motion must be >= 0")
        if not (0 <= self.activity_spread < 1 and 0 <= self.rate_spread < 1):
            raise ConfigError("activity_spread and rate_spread must be in [0, 1)")

    @classmethod
    def from_kv(cls, items: Mapping[str, str]) -> "SynthSpec":
        known = {f.name: f.type for f in fields(cls)}
        kwargs: dict = {}
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"unknown synth key {key!r}")
            try:
                if key in ("users", "seed", "twins", "population_seed"):
                    kwargs[key] = int(raw)
                elif key == "segment_seconds":
                    lo, hi = (float(v) for v in raw.split(","))
                    kwargs[key] = (lo, hi)
                else:
                    kwargs[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"synth key {key!r}: cannot parse {raw!r}") from exc
        return cls(**kwargs)

    def user_ids(self) -> list[str]:
        width = max(2, len(str(self.users)))
        return [f"u{i:0{width}d}" for i in range(self.users)]


@dataclass
class Signature:
    freq: np.ndarray        # (3 joints, 6 channels, COMPONENTS) Hz; channels: pos xyz, rot xyz
    amp: np.ndarray         # same shape; metres or radians
    phase: np.ndarray       # same shape
    offsets: np.ndarray     # (2, 3) controller posture offsets in the body frame
    rot_offsets: np.ndarray  # (2, 3) controller posture rotation (axis-angle)
    height: float
    activity_gain: np.ndarray  # (ACTIVITIES, 3, 6)
    activity_rate: np.ndarray  # (ACTIVITIES,)


def _oscillators(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frequencies, amplitudes and phases of shape (3 joints, 6 channels, COMPONENTS)."""
    freq = rng.uniform(0.5, 3.0, size=(3, 6, COMPONENTS))
    amp = np.empty((3, 6, COMPONENTS))
    amp[:, :3] = rng.uniform(0.01, 0.08, size=(3, 3, COMPONENTS))
    amp[:, 3:] = rng.uniform(0.05, 0.4, size=(3, 3, COMPONENTS))
    amp[0] *= 0.3  # the head moves less than the hands
    amp[..., 1:] *= 0.5  # second component is a weaker overtone
    return freq, amp, rng.uniform(0, 2 * np.pi, size=(3, 6, COMPONENTS))


def draw_signature(rng: np.random.Generator, spec: SynthSpec = SynthSpec()) -> Signature:
    freq, amp, phase = _oscillators(rng)
    return Signature(
        freq=freq,
        amp=amp,
        phase=phase,
        offsets=np.array([[-0.25, -0.45, 0.3], [0.25, -0.45, 0.3]]) + rng.normal(0, 0.08, size=(2, 3)),
        rot_offsets=rng.normal(0, 0.5, size=(2, 3)),
        height=float(rng.uniform(1.5, 1.9)),
        activity_gain=1.0 + rng.uniform(-spec.activity_spread, spec.activity_spread, size=(ACTIVITIES, 3, 6)),
        activity_rate=1.0 + rng.uniform(-spec.rate_spread, spec.rate_spread, size=ACTIVITIES),
    )


def _axis_angle_quat(v: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    axis = np.divide(v, angle, out=np.zeros_like(v), where=angle > 1e-12)
    return np.concatenate([axis * np.sin(angle / 2), np.cos(angle / 2)], axis=-1)


def _activity_weights(n: int, fps: float, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """(n, ACTIVITIES) mixing weights: random segments joined by linear cross-fades."""
    labels = np.empty(n, dtype=np.int64)
    pos = 0
    while pos < n:
        length = int(rng.uniform(*spec.segment_seconds) * fps)
        labels[pos:pos + max(1, length)] = rng.integers(ACTIVITIES)
        pos += max(1, length)
    hard = np.eye(ACTIVITIES)[labels]
    width = max(1, int(CROSSFADE_SECONDS * fps))
    kernel = np.ones(width) / width
    padded = np.pad(hard, ((width // 2, width - width // 2 - 1), (0, 0)), mode="edge")
    return np.stack([np.convolve(padded[:, a], kernel, mode="valid") for a in range(ACTIVITIES)], axis=1)


def shared_patterns(spec: SynthSpec) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """One oscillator set per activity, common to every user of the dataset."""
    rng = np.random.default_rng([spec.population_seed, 0])
    return [_oscillators(rng) for _ in range(ACTIVITIES)]


def _wave(freq: np.ndarray, amp: np.ndarray, phase: np.ndarray, t: np.ndarray) -> np.ndarray:
    arg = 2 * np.pi * freq[None] * t[:, None, None, None] + phase[None]
    return (amp[None] * np.sin(arg)).sum(axis=-1)


def _channels(sig: Signature, t: np.ndarray, weights: np.ndarray, amp_jitter: np.ndarray,
              freq_jitter: np.ndarray, shared: list | None = None, shared_gain: float = 0.0) -> np.ndarray:
    """(n, 3, 6) oscillation channels mixed across activities."""
    out = np.zeros((len(t), 3, 6))
    for a in range(ACTIVITIES):
        wave = _wave(sig.freq * sig.activity_rate[a] * freq_jitter, sig.amp, sig.phase, t)
        wave *= (sig.activity_gain[a] * amp_jitter)[None]
        if shared and shared_gain > 0:
            freq, amp, phase = shared[a]
            wave += shared_gain * _wave(freq, amp, phase, t)
        out += weights[:, a, None, None] * wave
    return out


def _walk(n: int, fps: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth random walk: integrated noise low-passed over about two seconds."""
    steps = rng.normal(0.0, scale / np.sqrt(fps), size=n)
    width = max(1, int(2 * fps))
    return np.convolve(np.cumsum(steps), np.ones(width) / width, mode="same")


def synth_session(sig: Signature, user_id: str, session_id: str, minutes: float, spec: SynthSpec,
                  rng: np.random.Generator, shared: list | None = None) -> RawSequence:
    fps = spec.fps
    n = int(round(minutes * 60 * fps))
    t = np.arange(n) / fps + rng.uniform(0, 1000)
    jit = spec.session_jitter
    amp_jitter = 1.0 + rng.normal(0, jit, size=(3, 6))
    freq_jitter = 1.0 + rng.normal(0, jit / 2.5, size=(3, 6, 1))
    weights = _activity_weights(n, fps, spec, rng)
    ch = _channels(sig, t, weights, amp_jitter, freq_jitter, shared, spec.shared_motion)

    yaw = rng.uniform(-np.pi, np.pi) + _walk(n, fps, 0.6, rng)
    walk_x = _walk(n, fps, 0.2, rng) + rng.uniform(-2, 2)
    walk_z = _walk(n, fps, 0.2, rng) + rng.uniform(-2, 2)
    qyaw = yaw_quaternion(yaw)

    def to_world(v):
        c, s = np.cos(yaw), np.sin(yaw)
        return np.stack([c * v[:, 0] + s * v[:, 2], v[:, 1], -s * v[:, 0] + c * v[:, 2]], axis=1)

    head_pos = np.stack([walk_x, np.full(n, sig.height), walk_z], axis=1) + to_world(ch[:, 0, :3])
    # head tilt: pitch about x then roll about z keeps the forward axis out of the yaw estimate
    pitch = _axis_angle_quat(np.stack([ch[:, 0, 3], np.zeros(n), np.zeros(n)], axis=1))
    roll = _axis_angle_quat(np.stack([np.zeros(n), np.zeros(n), ch[:, 0, 5]], axis=1))
    head_rot = quat_multiply(qyaw, quat_multiply(pitch, roll))

    feats = np.empty((n, NUM_FEATURES))
    feats[:, 0:3] = head_pos
    feats[:, 3:7] = head_rot
    for hand in (0, 1):
        joint = hand + 1
        rel = sig.offsets[hand][None] + ch[:, joint, :3]
        pos = head_pos + to_world(rel)
        rot = quat_multiply(_axis_angle_quat(sig.rot_offsets[hand])[None],
                            _axis_angle_quat(ch[:, joint, 3:]))
        rot = quat_multiply(qyaw, rot)
        base = 7 * joint
        feats[:, base:base + 3] = pos
        feats[:, base + 3:base + 7] = rot
    noise = spec.noise_mm * 1e-3
    for base in (0, 7, 14):
        feats[:, base:base + 3] += rng.normal(0, noise, size=(n, 3))
        q = feats[:, base + 3:base + 7] + rng.normal(0, noise, size=(n, 4))
        feats[:, base + 3:base + 7] = q / np.linalg.norm(q, axis=1, keepdims=True)
    timestamps = np.arange(n) / fps
    return RawSequence(user_id, session_id, fps, timestamps, feats)


def signatures(spec: SynthSpec) -> dict[str, Signature]:
    ids = spec.user_ids()
    sigs = {u: draw_signature(np.random.default_rng([spec.seed, 1, i]), spec) for i, u in enumerate(ids)}
    for j in range(spec.twins):
        sigs[ids[len(ids) - spec.twins + j]] = sigs[ids[j]]
    return sigs


def twin_pairs(spec: SynthSpec) -> list[tuple[str, str]]:
    ids = spec.user_ids()
    return [(ids[j], ids[len(ids) - spec.twins + j]) for j in range(spec.twins)]


def generate(spec: SynthSpec) -> dict[str, tuple[RawSequence, RawSequence]]:
    """user -> (session 1, session 2).  Same spec, same output."""
    out = {}
    shared = shared_patterns(spec)
    for i, (user, sig) in enumerate(signatures(spec).items()):
        s1 = synth_session(sig, user, "s1", spec.session1_minutes, spec,
                           np.random.default_rng([spec.seed, 2, i, 1]), shared)
        s2 = synth_session(sig, user, "s2", spec.session2_minutes, spec,
                           np.random.default_rng([spec.seed, 2, i, 2]), shared)
        out[user] = (s1, s2)
    return out


def write_dataset(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write CSV recordings plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"root={out_dir.resolve()}", f"fps={spec.fps!r}"]
    for user, sessions in generate(spec).items():
        for seq in sessions:
            name = f"{user}_{seq.session_id}.csv"
            write_recording(seq, out_dir / name)
            lines.append(f"recording.{user}.{seq.session_id}={name}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
