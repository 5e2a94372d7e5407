"""Motion sequences: root normalisation, temporal derivatives, half-body split,
``.motn`` file I/O and a procedural corpus with known beat times."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

SMPL_JOINTS = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)  # fmt: skip
JOINT = {name: i for i, name in enumerate(SMPL_JOINTS)}

# Rest pose (x to the body's left, y up, z forward), pelvis at the origin.
SMPL_REST_POSE = np.array([
    [0.00, 0.00, 0.00], [0.06, -0.09, 0.00], [-0.06, -0.09, 0.00], [0.00, 0.11, 0.00],
    [0.10, -0.47, 0.00], [-0.10, -0.47, 0.00], [0.00, 0.25, 0.00], [0.10, -0.87, 0.00],
    [-0.10, -0.87, 0.00], [0.00, 0.30, 0.00], [0.11, -0.92, 0.12], [-0.11, -0.92, 0.12],
    [0.00, 0.51, 0.00], [0.08, 0.41, 0.00], [-0.08, 0.41, 0.00], [0.00, 0.60, 0.05],
    [0.18, 0.45, 0.00], [-0.18, 0.45, 0.00], [0.44, 0.45, 0.00], [-0.44, 0.45, 0.00],
    [0.69, 0.45, 0.00], [-0.69, 0.45, 0.00], [0.77, 0.45, 0.00], [-0.77, 0.45, 0.00],
])  # fmt: skip
PELVIS_HEIGHT = 0.92


@dataclass(frozen=True)
class MotionSequence:
    frames: np.ndarray  # (T, J, 3)
    fps: float = 60.0
    skeleton_id: str = "smpl24"

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ConfigError(f"motion frames must be (T, J, 3), got {frames.shape}")
        if frames.shape[0] < 2:
            raise ConfigError("a motion sequence needs at least 2 frames")
        if not np.isfinite(frames).all():
            raise DataError("motion frames contain non-finite values")
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def joint_count(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class HalfBodySplit:
    upper: tuple[int, ...]
    lower: tuple[int, ...]
    root_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "upper", tuple(int(i) for i in self.upper))
        object.__setattr__(self, "lower", tuple(int(i) for i in self.lower))
        if set(self.upper) & set(self.lower):
            raise ConfigError("upper and lower joint sets overlap")
        if self.root_index not in self.lower:
            raise ConfigError("root joint must belong to the lower half body")

    @property
    def joint_count(self) -> int:
        return len(self.upper) + len(self.lower)

    def validate(self, joint_count: int) -> None:
        joints = sorted(self.upper + self.lower)
        if joints != list(range(joint_count)):
            if joints and (joints[0] < 0 or joints[-1] >= joint_count):
                raise IndexError(f"split indices out of range for J={joint_count}")
            raise ConfigError(f"split does not cover exactly the {joint_count} joints")


DEFAULT_SPLIT = HalfBodySplit(
    upper=(6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23),
    lower=(0, 1, 2, 3, 4, 5, 7, 8, 10, 11),
    root_index=0,
)


def toy_split(joint_count: int) -> HalfBodySplit:
    """Lower half = first ceil(J/2) joints (root 0), upper = the rest."""
    n_lower = (joint_count + 1) // 2
    return HalfBodySplit(tuple(range(n_lower, joint_count)), tuple(range(n_lower)), 0)


def default_split_for(joint_count: int) -> HalfBodySplit:
    return DEFAULT_SPLIT if joint_count == len(SMPL_JOINTS) else toy_split(joint_count)


# ---------------------------------------------------------------------------
# Root normalisation and derivatives
# ---------------------------------------------------------------------------


def normalize_root(motion: MotionSequence, root_index: int = 0) -> tuple[MotionSequence, np.ndarray]:
    """Subtract the root trajectory from every joint.

    Returns the root-centred motion and the (T-1, 3) root velocity
    ``root[t+1] - root[t]``.
    """
    if not 0 <= root_index < motion.joint_count:
        raise IndexError(f"root index {root_index} out of range")
    root = motion.frames[:, root_index, :]
    centred = motion.frames - root[:, None, :]
    velocity = np.diff(root, axis=0)
    return MotionSequence(centred, motion.fps, motion.skeleton_id), velocity


def integrate_velocity(velocity: np.ndarray, initial_root) -> np.ndarray:
    """Inverse of the velocity in :func:`normalize_root`: a (T, 3) root trajectory."""
    velocity = np.asarray(velocity)
    start = np.asarray(initial_root, dtype=velocity.dtype).reshape(1, 3)
    return np.concatenate([start, start + np.cumsum(velocity, axis=0)], axis=0)


def derivatives(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences along time: (T-1) velocities and (T-2) accelerations."""
    frames = np.asarray(frames)
    if frames.shape[0] < 3:
        raise ConfigError("derivatives need at least 3 frames")
    d1 = np.diff(frames, axis=0)
    return d1, np.diff(d1, axis=0)


def split_half_bodies(motion: MotionSequence | np.ndarray, split: HalfBodySplit) -> tuple[np.ndarray, np.ndarray]:
    frames = motion.frames if isinstance(motion, MotionSequence) else np.asarray(motion)
    split.validate(frames.shape[-2])
    return frames[..., list(split.upper), :], frames[..., list(split.lower), :]


def merge_half_bodies(upper: np.ndarray, lower: np.ndarray, split: HalfBodySplit) -> np.ndarray:
    upper, lower = np.asarray(upper), np.asarray(lower)
    out = np.empty(upper.shape[:-2] + (split.joint_count, 3), dtype=np.result_type(upper, lower))
    out[..., list(split.upper), :] = upper
    out[..., list(split.lower), :] = lower
    return out


def mean_joint_speed(frames: np.ndarray) -> np.ndarray:
    """Per-frame mean joint speed from central differences (length T)."""
    vel = np.gradient(np.asarray(frames, dtype=np.float64), axis=0)
    return np.linalg.norm(vel, axis=-1).mean(axis=-1)


# ---------------------------------------------------------------------------
# .motn files
# ---------------------------------------------------------------------------

MOTN_MAGIC = b"MOTN"
MOTN_VERSION = 1
_MOTN_HEADER = struct.Struct("<4sIIIfI")


def write_motion(path, motion: MotionSequence) -> None:
    T, J, _ = motion.frames.shape
    header = _MOTN_HEADER.pack(MOTN_MAGIC, MOTN_VERSION, T, J, motion.fps, 0)
    payload = np.ascontiguousarray(motion.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_motion(path, skeleton_id: str | None = None) -> MotionSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _MOTN_HEADER.size:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)} (need {_MOTN_HEADER.size})")
    magic, version, T, J, fps, _ = _MOTN_HEADER.unpack_from(raw, 0)
    if magic != MOTN_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != MOTN_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte offset 4")
    expected = T * J * 3 * 4
    payload = len(raw) - _MOTN_HEADER.size
    if payload < expected:
        raise DataError(
            f"{path}: truncated payload at byte offset {len(raw)}; header declares T={T}, J={J} "
            f"({expected} payload bytes) but only {payload} present"
        )
    if payload > expected:
        raise DataError(
            f"{path}: payload of {payload} bytes at byte offset {_MOTN_HEADER.size} does not match "
            f"header T={T}, J={J} ({expected} bytes)"
        )
    frames = np.frombuffer(raw, dtype="<f4", offset=_MOTN_HEADER.size).reshape(T, J, 3)
    sid = skeleton_id or ("smpl24" if J == len(SMPL_JOINTS) else f"toy{J}")
    return MotionSequence(frames.astype(np.float32), float(fps), sid)


def write_beats(path, beats) -> None:
    Path(path).write_text(json.dumps([int(b) for b in beats]))


def read_beats(path) -> np.ndarray:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid beat JSON ({exc})") from exc
    if not isinstance(values, list) or not all(isinstance(v, int) for v in values):
        raise DataError(f"{path}: beat file must be a JSON array of frame indices")
    return np.asarray(values, dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_sequences: int = 16
    T: int = 64
    J: int = 24
    fps: float = 60.0
    tempo_range: tuple[float, float] = (100.0, 140.0)
    seed: int = 0
    amplitude_range: tuple[float, float] = (0.1, 0.5)
    harmonic: float = 0.2
    # Optional shared choreographies: sequences then differ only in tempo, phase
    # and a small amplitude jitter. Styles come from ``style_seed`` (default:
    # ``seed``) so a held-out split can reuse the training styles.
    num_styles: int | None = None
    style_seed: int | None = None
    style_jitter: float = 0.1

    def __post_init__(self):
        if self.num_sequences < 0 or self.T < 3 or self.J < 1 or self.fps <= 0:
            raise ConfigError("invalid synthetic corpus spec")
        if self.num_styles is not None and self.num_styles < 1:
            raise ConfigError("num_styles must be >= 1")
        lo, hi = self.tempo_range
        if not 0 < lo <= hi:
            raise ConfigError("tempo range must be positive and ordered")


@dataclass(frozen=True)
class SyntheticSample:
    motion: MotionSequence
    beats: np.ndarray  # ground-truth dance/music beat frames
    tempo: float
    phase: float  # frame of the first speed minimum (may be fractional)
    seed: int = 0
    amplitudes: np.ndarray = field(default=None, repr=False)


def beat_period_frames(tempo_bpm: float, fps: float) -> float:
    return 60.0 * fps / tempo_bpm


def rest_pose(joint_count: int) -> np.ndarray:
    if joint_count == len(SMPL_JOINTS):
        return SMPL_REST_POSE.copy()
    # Toy skeleton: a vertical chain with lateral offsets.
    idx = np.arange(joint_count)
    return np.stack([0.15 * np.where(idx % 2, 1.0, -1.0) * (idx > 0), 0.12 * idx - 0.3 * (idx > 0), 0 * idx], axis=1)


def synthesize_motion(
    tempo: float,
    phase: float,
    amplitudes: np.ndarray,
    T: int,
    fps: float,
    harmonic: float = 0.2,
    root_sway: np.ndarray | None = None,
) -> np.ndarray:
    """Closed-form motion: rest pose plus per-joint sinusoids sharing one period.

    Every joint oscillates as ``A_j cos(w (t - phase)) + h A_j cos(2 w (t - phase))``
    where the motion period is two beats. All velocities vanish together at
    ``phase + k * beat_period``, which makes those frames the mean-speed minima.
    """
    J = amplitudes.shape[0]
    beat = beat_period_frames(tempo, fps)
    omega = math.pi / beat
    t = np.arange(T, dtype=np.float64)[:, None, None] - phase
    wave = np.cos(omega * t) + harmonic * np.cos(2.0 * omega * t)
    frames = rest_pose(J)[None] + amplitudes[None] * wave
    root = np.array([0.0, PELVIS_HEIGHT, 0.0])
    sway = np.zeros(3) if root_sway is None else root_sway
    root_track = root[None] + sway[None] * np.cos(omega * t[:, 0, :])
    frames = frames - frames[:, :1, :] + root_track[:, None, :]
    return frames


def ground_truth_beats(tempo: float, phase: float, T: int, fps: float) -> np.ndarray:
    beat = beat_period_frames(tempo, fps)
    k0 = math.ceil((0.5 - phase) / beat)
    times = phase + beat * np.arange(k0, k0 + int(T / beat) + 3)
    frames = np.rint(times).astype(np.int64)
    return frames[(frames >= 1) & (frames <= T - 2)]


def generate_synthetic(spec: SyntheticCorpusSpec) -> list[SyntheticSample]:
    """Deterministic corpus of sinusoidal dances with their beat frames."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.amplitude_range
    styles = None
    if spec.num_styles:
        srng = np.random.default_rng([spec.seed if spec.style_seed is None else spec.style_seed, 0x57])
        styles = []
        for _ in range(spec.num_styles):
            direction = srng.normal(size=(spec.J, 3))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            styles.append(direction * srng.uniform(lo, hi, size=(spec.J, 1)))
    samples = []
    for i in range(spec.num_sequences):
        tempo = float(rng.uniform(*spec.tempo_range))
        beat = beat_period_frames(tempo, spec.fps)
        phase = float(rng.uniform(0.0, beat))
        direction = rng.normal(size=(spec.J, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        amplitudes = direction * rng.uniform(lo, hi, size=(spec.J, 1))
        if styles is not None:
            jitter = 1.0 + spec.style_jitter * rng.standard_normal((spec.J, 1))
            amplitudes = styles[i % len(styles)] * jitter
        sway = rng.normal(size=3) * np.array([0.05, 0.02, 0.05])
        frames = synthesize_motion(tempo, phase, amplitudes, spec.T, spec.fps, spec.harmonic, sway)
        sid = "smpl24" if spec.J == len(SMPL_JOINTS) else f"toy{spec.J}"
        samples.append(
            SyntheticSample(
                motion=MotionSequence(frames, spec.fps, sid),
                beats=ground_truth_beats(tempo, phase, spec.T, spec.fps),
                tempo=tempo,
                phase=phase,
                seed=spec.seed,
                amplitudes=amplitudes,
            )
        )
    return samples
