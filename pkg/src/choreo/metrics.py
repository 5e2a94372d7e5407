"""Dance evaluation: kinetic/geometric features, Fréchet distance, diversity,
dance-beat extraction and the beat alignment score."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.spatial.distance import pdist

from .errors import ConfigError
from .motion import JOINT, SMPL_JOINTS, MotionSequence, mean_joint_speed

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def kinetic_features(motion: MotionSequence | np.ndarray) -> np.ndarray:
    """Per joint: mean speed, mean squared speed, mean acceleration magnitude.

    Returned as a flat ``3 * J`` vector ordered ``[speed..., energy..., accel...]``;
    units are length per frame.
    """
    frames = np.asarray(motion.frames if isinstance(motion, MotionSequence) else motion, dtype=np.float64)
    if frames.shape[0] < 3:
        raise ConfigError("kinetic features need at least 3 frames")
    vel = np.diff(frames, axis=0)
    acc = np.diff(vel, axis=0)
    speed = np.linalg.norm(vel, axis=-1)
    return np.concatenate([speed.mean(0), (speed**2).mean(0), np.linalg.norm(acc, axis=-1).mean(0)])


@dataclass(frozen=True)
class GeometricThresholds:
    hands_together: float = 0.2
    feet_apart: float = 0.5
    foot_forward: float = 0.15
    foot_raised: float = 0.15
    lean_forward: float = 0.1
    hands_behind: float = 0.05


GEOMETRIC_TEMPLATES = (
    "left_hand_above_head", "right_hand_above_head",
    "left_foot_in_front", "right_foot_in_front",
    "hands_together", "feet_apart",
    "left_elbow_bent", "right_elbow_bent",
    "left_knee_bent", "right_knee_bent",
    "left_hand_above_shoulder", "right_hand_above_shoulder",
    "torso_lean_forward", "hands_behind_back",
    "left_foot_raised", "right_foot_raised",
)  # fmt: skip


def _angle_below_90(a: np.ndarray, joint: np.ndarray, b: np.ndarray) -> np.ndarray:
    u, v = a - joint, b - joint
    return np.einsum("tc,tc->t", u, v) > 0.0


def geometric_features(motion: MotionSequence | np.ndarray, thresholds: GeometricThresholds | None = None) -> np.ndarray:
    """Fraction of frames satisfying each of 16 relational pose templates.

    Needs the 24-joint SMPL layout. Body-relative directions use the pelvis
    frame: ``forward = (left_hip - right_hip) x (spine1 - pelvis)``, up = +y.
    """
    th = thresholds or GeometricThresholds()
    P = np.asarray(motion.frames if isinstance(motion, MotionSequence) else motion, dtype=np.float64)
    if P.shape[1] != len(SMPL_JOINTS):
        raise ConfigError(f"geometric templates need the {len(SMPL_JOINTS)}-joint SMPL skeleton, got J={P.shape[1]}")
    j = {name: P[:, idx] for name, idx in JOINT.items()}
    pelvis = j["pelvis"]
    forward = np.cross(j["left_hip"] - j["right_hip"], j["spine1"] - pelvis)
    norm = np.linalg.norm(forward, axis=-1, keepdims=True)
    forward = np.where(norm > 1e-9, forward / np.maximum(norm, 1e-9), np.array([0.0, 0.0, 1.0]))

    def ahead(p):
        return np.einsum("tc,tc->t", p - pelvis, forward)

    y = 1
    flags = [
        j["left_wrist"][:, y] > j["head"][:, y],
        j["right_wrist"][:, y] > j["head"][:, y],
        ahead(j["left_foot"]) > th.foot_forward,
        ahead(j["right_foot"]) > th.foot_forward,
        np.linalg.norm(j["left_wrist"] - j["right_wrist"], axis=-1) < th.hands_together,
        np.linalg.norm(j["left_ankle"] - j["right_ankle"], axis=-1) > th.feet_apart,
        _angle_below_90(j["left_shoulder"], j["left_elbow"], j["left_wrist"]),
        _angle_below_90(j["right_shoulder"], j["right_elbow"], j["right_wrist"]),
        _angle_below_90(j["left_hip"], j["left_knee"], j["left_ankle"]),
        _angle_below_90(j["right_hip"], j["right_knee"], j["right_ankle"]),
        j["left_wrist"][:, y] > j["left_shoulder"][:, y],
        j["right_wrist"][:, y] > j["right_shoulder"][:, y],
        ahead(j["neck"]) > th.lean_forward,
        (ahead(j["left_wrist"]) < -th.hands_behind) & (ahead(j["right_wrist"]) < -th.hands_behind),
        j["left_ankle"][:, y] - j["right_ankle"][:, y] > th.foot_raised,
        j["right_ankle"][:, y] - j["left_ankle"][:, y] > th.foot_raised,
    ]
    return np.array([f.mean() for f in flags], dtype=np.float64)


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "GaussianStats":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ConfigError("fitting Gaussian statistics needs at least 2 feature vectors")
        return cls(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


def sqrtm_psd(matrix: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Square root of a symmetric PSD matrix by eigendecomposition.

    Eigenvalues down to ``-tol * max(1, |lambda|_max)`` are clamped to zero;
    anything more negative, or asymmetry above 1e-6 relative, is an error.
    """
    a = np.asarray(matrix, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > 1e-6 * scale:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    floor = -tol * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < floor:
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    if w.min(initial=0.0) < 0:
        log.debug("clamping %d slightly negative eigenvalues", int((w < 0).sum()))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ConfigError("Gaussian statistics have different dimensions")
    diff = a.mean - b.mean
    root_a = sqrtm_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = np.trace(sqrtm_psd((inner + inner.T) / 2.0))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(value, 0.0)


def diversity(features: Sequence[np.ndarray]) -> float:
    """Mean Euclidean distance over all unordered pairs of feature vectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ConfigError("diversity needs at least two feature vectors")
    return float(pdist(x).mean())


# ---------------------------------------------------------------------------
# Beats
# ---------------------------------------------------------------------------


def extract_dance_beats(
    motion: MotionSequence | np.ndarray,
    fps: float = 60.0,
    smooth_window: int = 5,
    min_gap: int | None = None,
) -> np.ndarray:
    """Frames at local minima of the smoothed mean joint speed.

    Minima are accepted deepest first (earliest frame on ties) and kept at
    least ``min_gap`` frames apart (default a quarter second).
    """
    if isinstance(motion, MotionSequence):
        frames, fps = motion.frames, motion.fps
    else:
        frames = np.asarray(motion)
    if frames.shape[0] < 3:
        raise ConfigError("dance beat extraction needs at least 3 frames")
    gap = max(1, int(round(0.25 * fps))) if min_gap is None else int(min_gap)
    speed = mean_joint_speed(frames)
    if smooth_window > 1:
        speed = uniform_filter1d(speed, size=smooth_window, mode="nearest")
    s = speed
    interior = np.flatnonzero((s[1:-1] < s[:-2]) & (s[1:-1] <= s[2:])) + 1
    order = interior[np.lexsort((interior, s[interior]))]
    taken: list[int] = []
    for c in order:
        if all(abs(int(c) - t) >= gap for t in taken):
            taken.append(int(c))
    return np.asarray(sorted(taken), dtype=np.int64)


def beat_align_score(
    dance_beats: Sequence[int],
    music_beats: Sequence[int],
    sigma: float = 3.0,
    fps: float = 60.0,
    reference_fps: float = 60.0,
) -> float:
    """Mean over music beats of ``exp(-d^2 / (2 sigma^2))`` to the nearest dance beat.

    ``sigma`` is in frames at ``reference_fps`` and rescaled to ``fps``.
    """
    bm = np.asarray(music_beats, dtype=np.float64)
    bd = np.asarray(dance_beats, dtype=np.float64)
    if bm.size == 0:
        raise ConfigError("beat align score needs at least one music beat")
    if bd.size == 0:
        return 0.0
    s = sigma * fps / reference_fps
    nearest = np.abs(bm[:, None] - bd[None, :]).min(axis=1)
    return float(np.mean(np.exp(-(nearest**2) / (2.0 * s * s))))


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    sigma: float = 3.0
    smooth_window: int = 5
    min_gap_seconds: float = 0.25

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    fid_k: float
    fid_g: float
    div_k: float
    div_g: float
    bas: float
    n_generated: int
    n_reference: int
    config_hash: str
    per_sequence: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        summary = {k: v for k, v in asdict(self).items() if k != "per_sequence"}
        return json.dumps(summary, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        header = "index,bas,n_dance_beats,n_music_beats,mean_speed"
        rows = [
            f"{r['index']},{r['bas']:.6f},{r['n_dance_beats']},{r['n_music_beats']},{r['mean_speed']:.6f}"
            for r in self.per_sequence
        ]
        return "\n".join([header, *rows]) + "\n"


def evaluate_suite(
    generated: Sequence[MotionSequence],
    reference: Sequence[MotionSequence],
    music_beats: Sequence[Sequence[int]] | None = None,
    config: EvalConfig | None = None,
) -> EvalReport:
    """FID (kinetic, geometric), diversity of the generated set and mean BAS.

    BAS is NaN when no music beats are supplied.
    """
    cfg = config or EvalConfig()
    if len(generated) < 2 or len(reference) < 2:
        raise ConfigError("evaluation needs at least 2 generated and 2 reference sequences")
    gk = np.stack([kinetic_features(m) for m in generated])
    rk = np.stack([kinetic_features(m) for m in reference])
    gg = np.stack([geometric_features(m) for m in generated])
    rg = np.stack([geometric_features(m) for m in reference])
    fid_k = frechet_distance(GaussianStats.fit(gk), GaussianStats.fit(rk))
    fid_g = frechet_distance(GaussianStats.fit(gg), GaussianStats.fit(rg))
    rows, scores = [], []
    for i, m in enumerate(generated):
        gap = max(1, int(round(cfg.min_gap_seconds * m.fps)))
        bd = extract_dance_beats(m.frames, m.fps, cfg.smooth_window, gap)
        bm = None if music_beats is None else np.asarray(music_beats[i])
        score = float("nan") if bm is None or bm.size == 0 else beat_align_score(bd, bm, cfg.sigma, m.fps)
        if not np.isnan(score):
            scores.append(score)
        rows.append(
            {
                "index": i,
                "bas": score,
                "n_dance_beats": int(bd.size),
                "n_music_beats": 0 if bm is None else int(bm.size),
                "mean_speed": float(mean_joint_speed(m.frames).mean()),
            }
        )
    return EvalReport(
        fid_k=fid_k,
        fid_g=fid_g,
        div_k=diversity(gk),
        div_g=diversity(gg),
        bas=float(np.mean(scores)) if scores else float("nan"),
        n_generated=len(generated),
        n_reference=len(reference),
        config_hash=cfg.hash(),
        per_sequence=rows,
    )
