"""Per-half-body pose VQ-VAE: temporal conv encoder, nearest-code quantizer,
pose decoder and (lower body only) a global-velocity decoder."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .motion import HalfBodySplit, MotionSequence, integrate_velocity, merge_half_bodies, normalize_root, split_half_bodies
from .numerics import ops
from .numerics.tensor import NumericalAbort, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VqVaeConfig:
    num_codes: int = 512  # N
    code_dim: int = 512  # C
    downsample: int = 8  # d
    width: int | None = None  # conv width; None -> C // 2

    def __post_init__(self):
        if self.num_codes < 2:
            raise ConfigError("codebook needs at least 2 entries")
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ConfigError("downsampling rate must be a power of two")

    @property
    def conv_width(self) -> int:
        return self.width or max(self.code_dim // 2, 8)


@dataclass(frozen=True)
class VqLossWeights:
    beta: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 1.0
    norm: str = "mse"  # "mse" (squared) or "l2" (unsquared) for codebook/commitment

    def __post_init__(self):
        if min(self.beta, self.alpha1, self.alpha2) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.norm not in ("mse", "l2"):
            raise ConfigError(f"unknown norm {self.norm!r}")


@dataclass(frozen=True)
class CodeSequence:
    upper: np.ndarray
    lower: np.ndarray
    d: int = 8
    fps: float = 60.0

    def __post_init__(self):
        up = np.asarray(self.upper, dtype=np.int64).reshape(-1)
        lo = np.asarray(self.lower, dtype=np.int64).reshape(-1)
        if up.shape != lo.shape:
            raise ConfigError("upper and lower code sequences differ in length")
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "lower", lo)

    def __len__(self) -> int:
        return self.upper.shape[0]

    def validate(self, num_codes: int) -> None:
        for codes in (self.upper, self.lower):
            if codes.size and (codes.min() < 0 or codes.max() >= num_codes):
                raise ConfigError(f"code index outside [0, {num_codes})")


# ---------------------------------------------------------------------------
# Network pieces
# ---------------------------------------------------------------------------


class ResBlock(nx.Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.conv1 = nx.Conv1d(width, width, 3, rng, padding=1)
        self.conv2 = nx.Conv1d(width, width, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(ops.relu(self.conv1(ops.relu(x))))


class Encoder(nx.Module):
    def __init__(self, in_dim: int, width: int, out_dim: int, n_down: int, rng: np.random.Generator):
        self.conv_in = nx.Conv1d(in_dim, width, 3, rng, padding=1)
        self.stages = []
        for _ in range(n_down):
            self.stages.append(ResBlock(width, rng))
            self.stages.append(nx.Conv1d(width, width, 4, rng, stride=2, padding=1))
        self.bottleneck = [ResBlock(width, rng), ResBlock(width, rng)]
        self.conv_out = nx.Conv1d(width, out_dim, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        for layer in self.stages + self.bottleneck:
            h = layer(h)
        return self.conv_out(ops.relu(h))


class Decoder(nx.Module):
    """Mirror of the encoder; nearest-neighbour x2 upsampling followed by conv."""

    def __init__(self, in_dim: int, width: int, out_dim: int, n_up: int, rng: np.random.Generator):
        self.conv_in = nx.Conv1d(in_dim, width, 3, rng, padding=1)
        self.bottleneck = [ResBlock(width, rng), ResBlock(width, rng)]
        self.up_convs = [nx.Conv1d(width, width, 3, rng, padding=1) for _ in range(n_up)]
        self.up_blocks = [ResBlock(width, rng) for _ in range(n_up)]
        self.conv_out = nx.Conv1d(width, out_dim, 3, rng, padding=1)

    def forward(self, z: Tensor) -> Tensor:
        h = self.conv_in(z)
        for block in self.bottleneck:
            h = block(h)
        for conv, block in zip(self.up_convs, self.up_blocks):
            h = block(conv(ops.upsample_nearest(h, 2)))
        return self.conv_out(ops.relu(h))


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------


def nearest_codes(e: np.ndarray, codebook: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the closest codebook row (squared Euclidean, lowest index on ties)."""
    e = np.asarray(e, dtype=np.float64).reshape(-1, codebook.shape[-1])
    z = np.asarray(codebook, dtype=np.float64)
    out = np.empty(e.shape[0], dtype=np.int64)
    for start in range(0, e.shape[0], chunk):
        block = e[start : start + chunk]
        dist = ((block[:, None, :] - z[None, :, :]) ** 2).sum(axis=-1)
        out[start : start + chunk] = dist.argmin(axis=1)
    return out


@dataclass
class Quantized:
    e_q: Tensor  # codebook values, gradient passed straight through to e
    z: Tensor  # the same values as a differentiable gather from the codebook
    indices: np.ndarray


def quantize(e: Tensor, codebook: Tensor) -> Quantized:
    idx = ops.frozen_indices(lambda: nearest_codes(e.data, codebook.data).reshape(e.shape[:-1]))
    z = ops.embedding(codebook, idx)
    return Quantized(ops.straight_through(e, z), z, idx)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class VqVaeModel(nx.Module):
    def __init__(self, half: str, joint_count: int, config: VqVaeConfig, seed: int = 0):
        if half not in ("upper", "lower"):
            raise ConfigError("half must be 'upper' or 'lower'")
        rng = np.random.default_rng(seed)
        self.half = half
        self.config = config
        self.joint_count = joint_count
        n_down = int(math.log2(config.downsample))
        w, C = config.conv_width, config.code_dim
        self.encoder = Encoder(joint_count * 3, w, C, n_down, rng)
        self.decoder = Decoder(C, w, joint_count * 3, n_down, rng)
        self.codebook = nx.parameter(rng.uniform(-1.0 / config.num_codes, 1.0 / config.num_codes, (config.num_codes, C)))
        self.velocity_decoder = Decoder(C, w, 3, n_down, rng) if half == "lower" else None
        self.usage = np.zeros(config.num_codes, dtype=np.int64)

    @property
    def d(self) -> int:
        return self.config.downsample

    def _prepare(self, poses) -> Tensor:
        x = poses if isinstance(poses, Tensor) else Tensor(np.asarray(poses, dtype=self.codebook.dtype))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim == 4:
            x = x.reshape(x.shape[0], x.shape[1], -1)
        T = x.shape[1]
        if T < self.d:
            raise ConfigError(f"sequence of {T} frames is shorter than the downsampling rate {self.d}")
        if x.shape[2] != self.joint_count * 3:
            raise ConfigError(f"expected {self.joint_count * 3} pose channels, got {x.shape[2]}")
        crop = (T // self.d) * self.d
        return x if crop == T else x[:, :crop]

    def encode(self, poses) -> Tensor:
        """(B, T, J*3) or (B, T, J, 3) poses -> (B, T/d, C) features; trailing frames cropped."""
        return self.encoder(self._prepare(poses))

    def quantize(self, e: Tensor) -> Quantized:
        return quantize(e, self.codebook)

    def decode_pose(self, e_q: Tensor) -> Tensor:
        return self.decoder(e_q)

    def boundary_frames(self) -> int:
        """Output frames at each end that see the decoder's zero padding.

        Code-rate layers (input conv and two residual blocks) reach 3 code
        steps, each x2 stage reaches 2 samples at its own rate and the output
        conv one frame.
        """
        n_up = len(self.decoder.up_convs)
        return 3 * self.d + sum(2 * self.d // 2**i for i in range(1, n_up + 1)) + 1

    def decode_velocity(self, e_q: Tensor) -> Tensor:
        if self.velocity_decoder is None:
            raise ConfigError("only the lower-body model has a velocity decoder")
        v = self.velocity_decoder(e_q)
        return v[:, : v.shape[1] - 1]

    def codes(self, poses) -> np.ndarray:
        with no_grad():
            return self.quantize(self.encode(poses)).indices

    def embed_codes(self, indices) -> Tensor:
        return ops.embedding(self.codebook, np.asarray(indices, dtype=np.int64))

    def main_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if not k.startswith("velocity_decoder.")}

    def velocity_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if k.startswith("velocity_decoder.")}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def rec_loss(pred: Tensor, target, alpha1: float = 1.0, alpha2: float = 1.0) -> Tensor:
    """Mean L1 on positions plus weighted mean L1 on first and second time differences."""
    target = nx.as_tensor(target)
    loss = ops.l1(pred, target)
    if alpha1 or alpha2:
        dp = pred[:, 1:] - pred[:, :-1]
        dt = target[:, 1:] - target[:, :-1]
        if alpha1:
            loss = loss + alpha1 * ops.l1(dp, dt)
        if alpha2 and pred.shape[1] >= 3:
            loss = loss + alpha2 * ops.l1(dp[:, 1:] - dp[:, :-1], dt[:, 1:] - dt[:, :-1])
    return loss


def _distance(a: Tensor, b: Tensor, norm: str) -> Tensor:
    diff = a - b
    if norm == "mse":
        return ops.mean(diff * diff)
    return ops.mean(ops.sqrt(ops.sum(diff * diff, axis=-1) + 1e-12))


@dataclass
class VqLoss:
    total: Tensor
    rec: float
    codebook: float
    commit: float


def vq_loss(pred: Tensor, target, e: Tensor, z: Tensor, weights: VqLossWeights = VqLossWeights()) -> VqLoss:
    """Reconstruction + codebook term ``d(sg[e], z)`` + ``beta * d(e, sg[z])``."""
    rec = rec_loss(pred, target, weights.alpha1, weights.alpha2)
    codebook_term = _distance(ops.stop_gradient(e), z, weights.norm)
    commit_term = _distance(e, ops.stop_gradient(z), weights.norm)
    total = rec + codebook_term + weights.beta * commit_term
    return VqLoss(total, float(rec.data), float(codebook_term.data), float(commit_term.data))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class VqTrainSchedule:
    steps: int = 2000
    batch_size: int = 32
    crop: int = 240  # frames per training window (multiple of d)
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    velocity_steps: int = 500
    dead_code_reset: bool = True
    dead_code_interval: int | None = None  # steps; None -> one epoch over the windows
    init_from_data: bool = True  # seed the codebook with encoder outputs of the first batch
    warmup_steps: int = 0  # linear learning-rate warmup
    log_every: int = 100


@dataclass
class VqTrainResult:
    loss: list[float] = field(default_factory=list)
    rec: list[float] = field(default_factory=list)
    velocity_loss: list[float] = field(default_factory=list)
    resets: int = 0


def half_body_data(motions: Sequence[MotionSequence], split: HalfBodySplit, half: str):
    """Root-normalised (S, T, |half|*3) poses and (S, T-1, 3) root velocities."""
    poses, vels = [], []
    for m in motions:
        centred, vel = normalize_root(m, split.root_index)
        up, lo = split_half_bodies(centred, split)
        part = up if half == "upper" else lo
        poses.append(part.reshape(part.shape[0], -1))
        vels.append(vel)
    return np.stack(poses).astype(np.float32), np.stack(vels).astype(np.float32)


def _sample_batch(rng: np.random.Generator, n_seq: int, T: int, crop: int, batch: int):
    seq = rng.integers(0, n_seq, size=batch)
    start = rng.integers(0, T - crop + 1, size=batch)
    return seq, start


def _windows(data: np.ndarray, seq, start, crop: int) -> np.ndarray:
    return np.stack([data[s, o : o + crop] for s, o in zip(seq, start)])


class VqTrainer:
    """Two-phase trainer; state (optimizer, RNG, step) is checkpointable."""

    def __init__(self, model: VqVaeModel, poses: np.ndarray, velocities: np.ndarray | None,
                 weights: VqLossWeights, schedule: VqTrainSchedule):
        if poses.shape[0] == 0:
            raise ConfigError("empty training corpus")
        self.model, self.poses, self.velocities = model, poses, velocities
        self.weights, self.schedule = weights, schedule
        crop = min(schedule.crop, poses.shape[1])
        self.crop = (crop // model.d) * model.d
        if self.crop < model.d:
            raise ConfigError("training windows are shorter than one code step")
        self.rng = np.random.default_rng([schedule.seed, 0x5651])
        self.optimizer = nx.Adam(model.main_parameters(), nx.AdamConfig(schedule.lr, schedule.beta1, schedule.beta2))
        self.velocity_optimizer = (
            nx.Adam(model.velocity_parameters(), nx.AdamConfig(schedule.lr, schedule.beta1, schedule.beta2))
            if model.velocity_decoder is not None and velocities is not None
            else None
        )
        n_windows = poses.shape[0] * max(1, poses.shape[1] // self.crop)
        self.interval = schedule.dead_code_interval or max(1, math.ceil(n_windows / schedule.batch_size))
        self.step = 0
        self.velocity_step = 0
        self.usage_window = np.zeros(model.config.num_codes, dtype=np.int64)
        self.result = VqTrainResult()

    def train_step(self) -> VqLoss:
        m, s = self.model, self.schedule
        seq, start = _sample_batch(self.rng, self.poses.shape[0], self.poses.shape[1], self.crop, s.batch_size)
        x = _windows(self.poses, seq, start, self.crop)
        self.optimizer.zero_grad()
        e = m.encode(x)
        if self.step == 0 and s.init_from_data:
            flat = e.data.reshape(-1, e.shape[-1])
            pick = self.rng.integers(0, flat.shape[0], size=m.config.num_codes)
            m.codebook.data[:] = flat[pick]
        q = m.quantize(e)
        pred = m.decode_pose(q.e_q)
        loss = vq_loss(pred, x, e, q.z, self.weights)
        if not np.isfinite(loss.total.data):
            raise NumericalAbort(
                f"VQ-VAE loss became non-finite at step {self.step + 1}",
                {"step": self.step + 1, "rec": loss.rec, "codebook": loss.codebook, "commit": loss.commit},
            )
        loss.total.backward()
        if s.warmup_steps:
            self.optimizer.lr = s.lr * min(1.0, (self.step + 1) / s.warmup_steps)
        self.optimizer.step()
        self.step += 1
        counts = np.bincount(q.indices.reshape(-1), minlength=m.config.num_codes)
        self.usage_window += counts
        m.usage += counts
        if s.dead_code_reset and self.step % self.interval == 0 and self.step <= 0.8 * s.steps:
            self._reset_dead_codes(e.data.reshape(-1, e.shape[-1]))
        self.result.loss.append(float(loss.total.data))
        self.result.rec.append(loss.rec)
        return loss

    def _reset_dead_codes(self, encodings: np.ndarray) -> None:
        dead = np.flatnonzero(self.usage_window == 0)
        if dead.size:
            pick = self.rng.integers(0, encodings.shape[0], size=dead.size)
            self.model.codebook.data[dead] = encodings[pick]
            for buf in (self.optimizer.m, self.optimizer.v):
                buf["codebook"][dead] = 0.0
            self.result.resets += int(dead.size)
        self.usage_window[:] = 0

    def velocity_step_once(self) -> float:
        m, s = self.model, self.schedule
        seq, start = _sample_batch(self.rng, self.poses.shape[0], self.poses.shape[1], self.crop, s.batch_size)
        x = _windows(self.poses, seq, start, self.crop)
        target = np.stack([self.velocities[i, o : o + self.crop - 1] for i, o in zip(seq, start)])
        with no_grad():
            e_q = m.quantize(m.encode(x)).e_q
        self.velocity_optimizer.zero_grad()
        loss = rec_loss(m.decode_velocity(Tensor(e_q.data)), target, self.weights.alpha1, self.weights.alpha2)
        if not np.isfinite(loss.data):
            raise NumericalAbort(f"velocity loss became non-finite at step {self.velocity_step + 1}")
        loss.backward()
        self.velocity_optimizer.step()
        self.velocity_step += 1
        self.result.velocity_loss.append(float(loss.data))
        return float(loss.data)

    def run(self) -> VqTrainResult:
        s = self.schedule
        while self.step < s.steps:
            loss = self.train_step()
            if s.log_every and self.step % s.log_every == 0:
                log.info("vqvae[%s] step %d loss %.5f rec %.5f", self.model.half, self.step, float(loss.total.data), loss.rec)
        if self.velocity_optimizer is not None:
            while self.velocity_step < s.velocity_steps:
                self.velocity_step_once()
        return self.result


def train_vqvae(
    motions: Sequence[MotionSequence],
    model: VqVaeModel,
    split: HalfBodySplit,
    weights: VqLossWeights = VqLossWeights(),
    schedule: VqTrainSchedule = VqTrainSchedule(),
) -> VqTrainResult:
    """Train E, D_P and the codebook jointly, then D_V alone (lower body)."""
    if not motions:
        raise ConfigError("empty training corpus")
    poses, vels = half_body_data(motions, split, model.half)
    return VqTrainer(model, poses, vels if model.half == "lower" else None, weights, schedule).run()


# ---------------------------------------------------------------------------
# Corpus <-> codes
# ---------------------------------------------------------------------------


def _check_pair(upper: VqVaeModel, lower: VqVaeModel) -> None:
    if upper.half != "upper" or lower.half != "lower":
        raise ConfigError("expected an (upper, lower) model pair")
    if upper.d != lower.d:
        raise ConfigError("upper and lower models use different downsampling rates")


def encode_corpus_to_codes(upper: VqVaeModel, lower: VqVaeModel, motion: MotionSequence, split: HalfBodySplit) -> CodeSequence:
    _check_pair(upper, lower)
    centred, _ = normalize_root(motion, split.root_index)
    up, lo = split_half_bodies(centred, split)
    T = up.shape[0]
    return CodeSequence(
        upper.codes(up.reshape(1, T, -1))[0],
        lower.codes(lo.reshape(1, T, -1))[0],
        upper.d,
        motion.fps,
    )


def decode_codes(
    upper: VqVaeModel,
    lower: VqVaeModel,
    codes: CodeSequence,
    split: HalfBodySplit,
    initial_root=(0.0, 0.92, 0.0),
    with_root: bool = True,
) -> MotionSequence:
    """Codes -> root-centred half-body poses -> merged skeleton (+ integrated root)."""
    _check_pair(upper, lower)
    codes.validate(upper.config.num_codes)
    with no_grad():
        zu = upper.embed_codes(codes.upper[None])
        zl = lower.embed_codes(codes.lower[None])
        pu = upper.decode_pose(zu).data[0]
        pl = lower.decode_pose(zl).data[0]
        T = pu.shape[0]
        frames = merge_half_bodies(pu.reshape(T, -1, 3), pl.reshape(T, -1, 3), split)
        if with_root and lower.velocity_decoder is not None:
            root = integrate_velocity(lower.decode_velocity(zl).data[0], initial_root)
            frames = frames - frames[:, split.root_index : split.root_index + 1] + root[:, None, :]
    return MotionSequence(frames, codes.fps)
