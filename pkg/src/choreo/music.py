"""Per-frame music features: ``.mfeat`` I/O, alignment to the code-step
timeline, a simple onset peak picker and a synthetic track generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigError, DataError
from .motion import SyntheticSample, beat_period_frames, ground_truth_beats

DEFAULT_FEATURE_DIM = 438


@dataclass(frozen=True)
class MusicFeatureTrack:
    features: np.ndarray  # (T, F)
    fps: float = 60.0
    beats: np.ndarray = None  # sorted frame indices
    onset_channel: int | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise ConfigError(f"music features must be (T, F), got {feats.shape}")
        if not np.isfinite(feats).all():
            raise DataError("music features contain non-finite values")
        beats = np.zeros(0, np.int64) if self.beats is None else np.asarray(self.beats, dtype=np.int64)
        if beats.size and (beats.min() < 0 or beats.max() >= feats.shape[0] or np.any(np.diff(beats) <= 0)):
            raise DataError("music beats must be strictly increasing frame indices inside the track")
        if self.onset_channel is not None and not 0 <= self.onset_channel < feats.shape[1]:
            raise ConfigError("onset channel out of range")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "beats", beats)

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class CodeStepFeatures:
    features: np.ndarray  # (T', F)
    step: int

    def __len__(self) -> int:
        return self.features.shape[0]


def downsample_features(track: MusicFeatureTrack | np.ndarray, d: int, mode: str = "mean") -> CodeStepFeatures:
    """Pool frames into code steps; step ``t`` covers frames ``[t*d, (t+1)*d)``."""
    feats = track.features if isinstance(track, MusicFeatureTrack) else np.asarray(track, dtype=np.float32)
    if d < 1:
        raise ConfigError("downsampling rate must be >= 1")
    T = feats.shape[0]
    if T < d:
        raise ConfigError(f"track of {T} frames is shorter than one code step ({d} frames)")
    n = T // d
    if mode == "mean":
        out = feats[: n * d].reshape(n, d, -1).mean(axis=1)
    elif mode == "stride":
        out = feats[: n * d : d].copy()
    else:
        raise ConfigError(f"unknown downsampling mode {mode!r}")
    return CodeStepFeatures(out.astype(np.float32), d)


def beat_steps(beats: Sequence[int], d: int, n_steps: int) -> np.ndarray:
    """Boolean per code step: does any beat frame fall in ``[t*d, (t+1)*d)``."""
    out = np.zeros(n_steps, dtype=bool)
    steps = np.asarray(beats, dtype=np.int64) // d
    out[steps[(steps >= 0) & (steps < n_steps)]] = True
    return out


def pick_beats_from_onset(onset, min_gap: int, threshold: float) -> np.ndarray:
    """Greedy peak picking on an onset envelope.

    Candidates are local maxima strictly above ``threshold``. They are accepted
    by descending height (earlier frame first on ties) unless closer than
    ``min_gap`` frames to an accepted peak.
    """
    if min_gap < 1:
        raise ConfigError("min_gap must be >= 1")
    x = np.asarray(onset, dtype=np.float64)
    if x.size == 0:
        return np.zeros(0, dtype=np.int64)
    left = np.concatenate([[-np.inf], x[:-1]])
    right = np.concatenate([x[1:], [-np.inf]])
    candidates = np.flatnonzero((x > threshold) & (x >= left) & (x >= right))
    order = candidates[np.lexsort((candidates, -x[candidates]))]
    taken: list[int] = []
    for c in order:
        if all(abs(int(c) - t) >= min_gap for t in taken):
            taken.append(int(c))
    return np.asarray(sorted(taken), dtype=np.int64)


def generate_synthetic_music(
    samples: Sequence[SyntheticSample],
    feature_dim: int = DEFAULT_FEATURE_DIM,
    seed: int | None = None,
    noise_scale: float = 0.1,
    beat_shift: float = 0.0,
) -> list[MusicFeatureTrack]:
    """Feature tracks paired with a synthetic motion corpus.

    Channel 0 is an onset impulse train at the beat frames, channels 1-2 carry
    the cosine/sine of the beat phase, channel 3 the tempo (in units of 120 BPM)
    and the remaining channels are temporally smoothed noise. ``beat_shift``
    (in beats) offsets the music from the dance and exists to build
    deliberately misaligned training data; with the default of 0 the track's
    beats equal the motion's ground truth exactly.
    """
    if feature_dim < 4:
        raise ConfigError("synthetic music needs at least 4 feature channels")
    base_seed = samples[0].seed if seed is None and samples else (seed or 0)
    rng = np.random.default_rng([base_seed, 0x6D75])
    tracks = []
    for sample in samples:
        T, fps = sample.motion.num_frames, sample.motion.fps
        beat = beat_period_frames(sample.tempo, fps)
        if beat_shift:
            phase = sample.phase + beat_shift * beat
            beats = ground_truth_beats(sample.tempo, phase, T, fps)
        else:
            phase, beats = sample.phase, np.asarray(sample.beats, dtype=np.int64)
        feats = np.empty((T, feature_dim), dtype=np.float64)
        feats[:, 0] = 0.0
        feats[beats, 0] = 1.0
        angle = 2.0 * np.pi * (np.arange(T) - phase) / beat
        feats[:, 1] = np.cos(angle)
        feats[:, 2] = np.sin(angle)
        feats[:, 3] = sample.tempo / 120.0
        noise = rng.normal(size=(T, feature_dim - 4))
        feats[:, 4:] = noise_scale * gaussian_filter1d(noise, sigma=4.0, axis=0, mode="nearest") * 2.0
        tracks.append(MusicFeatureTrack(feats.astype(np.float32), fps, beats, onset_channel=0))
    return tracks


# ---------------------------------------------------------------------------
# .mfeat files
# ---------------------------------------------------------------------------

MFEAT_MAGIC = b"MFEA"
MFEAT_VERSION = 1
_MFEAT_HEADER = struct.Struct("<4sIIIfi")


def write_features(path, track: MusicFeatureTrack) -> None:
    T, F = track.features.shape
    onset = -1 if track.onset_channel is None else track.onset_channel
    header = _MFEAT_HEADER.pack(MFEAT_MAGIC, MFEAT_VERSION, T, F, track.fps, onset)
    Path(path).write_bytes(header + np.ascontiguousarray(track.features, dtype="<f4").tobytes())


def read_features(path, beats=None) -> MusicFeatureTrack:
    raw = Path(path).read_bytes()
    if len(raw) < _MFEAT_HEADER.size:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)} (need {_MFEAT_HEADER.size})")
    magic, version, T, F, fps, onset = _MFEAT_HEADER.unpack_from(raw, 0)
    if magic != MFEAT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != MFEAT_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte offset 4")
    expected = T * F * 4
    payload = len(raw) - _MFEAT_HEADER.size
    if payload != expected:
        where = len(raw) if payload < expected else _MFEAT_HEADER.size
        raise DataError(
            f"{path}: payload size {payload} at byte offset {where} does not match header T={T}, F={F} "
            f"({expected} bytes)"
        )
    feats = np.frombuffer(raw, dtype="<f4", offset=_MFEAT_HEADER.size).reshape(T, F).astype(np.float32)
    return MusicFeatureTrack(feats, float(fps), beats, None if onset < 0 else onset)
