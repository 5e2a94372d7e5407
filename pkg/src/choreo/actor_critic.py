"""Actor-critic finetuning of the motion GPT with beat-align and half-body
consistency rewards computed on decoded dance."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .gpt import Block, GptConfig, MotionGpt, additive_mask, build_mask, generate, split_actions
from .metrics import beat_align_score, extract_dance_beats
from .motion import JOINT, HalfBodySplit, MotionSequence
from .music import CodeStepFeatures, beat_steps
from .numerics import ops
from .numerics.tensor import NumericalAbort, Tensor, no_grad
from .vqvae import CodeSequence, VqVaeModel, decode_codes

log = logging.getLogger(__name__)

CRITIC_LAYERS = 3
DEGENERATE_NORMAL = 1e-6


@dataclass(frozen=True)
class RewardConfig:
    gamma_b: float = 5.0
    gamma_c: float = 1.0
    d: int = 8

    def __post_init__(self):
        if self.gamma_b < 0 or self.gamma_c < 0:
            raise ConfigError("reward weights must be non-negative")
        if self.d < 1:
            raise ConfigError("code step must be >= 1 frame")


class Critic(nx.Module):
    """Three masked transformer layers over the states and a zero-initialised value head."""

    def __init__(self, config: GptConfig, seed: int = 0, layers: int = CRITIC_LAYERS):
        rng = np.random.default_rng([seed, 0xC717])
        self.dropout_rng = np.random.default_rng([seed, 0xC7D0])
        self.cross = config.cross_conditional
        self.blocks = [Block(config, rng, self.dropout_rng) for _ in range(layers)]
        self.ln_f = nx.LayerNorm(config.channels)
        self.head = nx.Linear(config.channels, 1, rng)
        self.head.weight.data[...] = 0.0
        self.head.bias.data[...] = 0.0

    def forward(self, s: Tensor) -> Tensor:
        mask = additive_mask(build_mask(s.shape[1] // 3, self.cross))
        x = s
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.ln_f(x))  # (B, 3T, 1)


def critic_values(critic: Critic, s: Tensor) -> Tensor:
    """``v_t = f_v(s)[T + t] + f_v(s)[2T + t]``; the states are cut from the graph."""
    out = critic(ops.stop_gradient(s))
    T = out.shape[1] // 3
    return out[:, T : 2 * T, 0] + out[:, 2 * T :, 0]


def td_error(r, v: Tensor) -> Tensor:
    """``eps_t = r_t + sg[v_{t+1}] - v_t`` for ``t`` in ``[0, T-2]``; works on (T,) or (B, T)."""
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
    r = np.asarray(r, dtype=v.dtype)
    T = v.shape[-1]
    if r.shape[-1] not in (T, T - 1):
        raise ConfigError(f"rewards of length {r.shape[-1]} do not match {T} values")
    r = r[..., : T - 1]
    return Tensor(r) + ops.stop_gradient(v[..., 1:]) - v[..., : T - 1]


def ac_loss(a_upper: Tensor, a_lower: Tensor, eps) -> Tensor:
    """Cross-entropy toward the greedy codes, weighted by the detached TD error.

    ``a_*`` are (B, T, N) action logits; the targets are their own argmax at
    steps ``0..T-2`` and ``eps`` is (B, T-1).
    """
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    T = a_upper.shape[1]
    if eps.shape[-1] != T - 1:
        raise ConfigError("TD error must have one entry fewer than the actions")
    au, al = a_upper[:, : T - 1], a_lower[:, : T - 1]
    ce = ops.cross_entropy(au, au.data.argmax(-1), reduction="none") + ops.cross_entropy(
        al, al.data.argmax(-1), reduction="none"
    )
    weighted = ce * Tensor(eps.astype(ce.dtype).reshape(ce.shape))
    return weighted.sum() * (1.0 / (weighted.shape[0] * (T - 1)))


def critic_loss(eps: Tensor) -> Tensor:
    """``||eps||^2 / (T-1)``, averaged over the batch."""
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=np.float64))
    if eps.ndim == 1:
        eps = eps.reshape(1, -1)
    return (eps * eps).sum() * (1.0 / (eps.shape[0] * eps.shape[1]))


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------


def beat_align_reward(dance_beats, music_beat_steps, d: int) -> np.ndarray:
    """-1 for every step whose window has a music beat but no dance beat, else +1."""
    music = np.asarray(music_beat_steps, dtype=bool)
    dance = beat_steps(dance_beats, d, music.shape[0])
    return np.where(music & ~dance, -1.0, 1.0)


def body_normals(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit x-z facing normals of the upper and lower body, plus a per-frame degenerate flag."""
    f = np.asarray(frames, dtype=np.float64)
    if f.shape[1] != len(JOINT):
        raise ConfigError(f"consistency reward needs the {len(JOINT)}-joint skeleton, got {f.shape[1]} joints")
    upper = np.cross(
        f[:, JOINT["right_shoulder"]] - f[:, JOINT["left_shoulder"]], f[:, JOINT["neck"]] - f[:, JOINT["pelvis"]]
    )
    lower = np.cross(f[:, JOINT["right_hip"]] - f[:, JOINT["left_hip"]], f[:, JOINT["spine1"]] - f[:, JOINT["pelvis"]])
    bad = np.zeros(f.shape[0], dtype=bool)
    out = []
    for n in (upper, lower):
        raw = np.linalg.norm(n, axis=1)
        xz = n[:, [0, 2]]
        norm = np.linalg.norm(xz, axis=1)
        bad |= (raw < DEGENERATE_NORMAL) | (norm < DEGENERATE_NORMAL)
        out.append(xz / np.maximum(norm, DEGENERATE_NORMAL)[:, None])
    return out[0], out[1], bad


def frame_consistency(nu: np.ndarray, nl: np.ndarray, degenerate: np.ndarray | None = None) -> np.ndarray:
    """Per-frame ``dot(n_u, n_l)`` where that is negative, else 1."""
    dot = np.sum(np.asarray(nu) * np.asarray(nl), axis=-1)
    r = np.where(dot < 0, dot, 1.0)
    if degenerate is not None:
        r = np.where(degenerate, 1.0, r)
    return r


def consistency_reward(frames: np.ndarray, d: int, n_steps: int | None = None) -> np.ndarray:
    """Window infimum of the per-frame consistency over each code step."""
    nu, nl, bad = body_normals(frames)
    if bad.any():
        log.debug("%d frames with degenerate body normals treated as consistent", int(bad.sum()))
    r = frame_consistency(nu, nl, bad)
    n = r.shape[0] // d if n_steps is None else n_steps
    if n * d > r.shape[0]:
        raise ConfigError("motion shorter than the requested number of code steps")
    return r[: n * d].reshape(n, d).min(axis=1)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutTrace:
    codes: np.ndarray  # (B, 2, T+1) trajectory incl. the start code
    rewards: np.ndarray  # (B, T)
    beat_rewards: np.ndarray  # (B, T)
    consistency_rewards: np.ndarray  # (B, T)
    bas: np.ndarray  # (B,)


@dataclass
class Episode:
    music: np.ndarray  # (T, F) rows m[s+1 : s+T+1]
    start: tuple[int, int]
    music_beats: np.ndarray  # frames relative to the start code's first frame


def greedy_rollout(model: MotionGpt, music: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Batched in-block greedy rollout: (B, T, F) music and (B, 2) start codes -> (B, 2, T+1)."""
    B, T, _ = music.shape
    up = np.zeros((B, T + 1), dtype=np.int64)
    lo = np.zeros((B, T + 1), dtype=np.int64)
    up[:, 0], lo[:, 0] = start[:, 0], start[:, 1]
    with no_grad():
        for t in range(T):
            au, al = split_actions(model(music[:, : t + 1], up[:, : t + 1], lo[:, : t + 1]))
            up[:, t + 1] = au.data[:, -1].argmax(-1)
            lo[:, t + 1] = al.data[:, -1].argmax(-1)
    return np.stack([up, lo], axis=1)


def score_trajectories(codes: np.ndarray, episodes: Sequence[Episode], vq: tuple[VqVaeModel, VqVaeModel],
                       split: HalfBodySplit, config: RewardConfig) -> RolloutTrace:
    """Decode each trajectory and reward action ``t`` on the window of code step ``t + 1``."""
    d = config.d
    T = codes.shape[2] - 1
    rb, rc, bas = [], [], []
    for traj, ep in zip(codes, episodes):
        motion = decode_codes(vq[0], vq[1], CodeSequence(traj[0], traj[1], d), split)
        dance = extract_dance_beats(motion)
        steps = beat_steps(ep.music_beats, d, T + 1)
        rb.append(beat_align_reward(dance, steps, d)[1:])
        rc.append(consistency_reward(motion.frames, d, T + 1)[1:])
        inside = ep.music_beats[(ep.music_beats >= 0) & (ep.music_beats < motion.num_frames)]
        bas.append(beat_align_score(dance, inside) if inside.size else 1.0)
    rb, rc = np.array(rb), np.array(rc)
    return RolloutTrace(codes, config.gamma_b * rb + config.gamma_c * rc, rb, rc, np.array(bas))


def make_episodes(codes: Sequence[CodeSequence], music: Sequence[CodeStepFeatures], beats: Sequence[np.ndarray],
                  block: int, stride: int | None = None) -> list[Episode]:
    """Episodes start at every ``stride``-th code of each sequence (default: one block apart)."""
    stride = block if stride is None else stride
    out = []
    for c, m, b in zip(codes, music, beats):
        feats = m.features if isinstance(m, CodeStepFeatures) else np.asarray(m)
        d = m.step if isinstance(m, CodeStepFeatures) else c.d
        n = min(len(c), feats.shape[0])
        for s in range(0, n - block, stride):
            rel = np.asarray(b, dtype=np.int64) - s * d
            out.append(Episode(feats[s + 1 : s + block + 1], (int(c.upper[s]), int(c.lower[s])), rel))
    if not out:
        raise ConfigError(f"no sequence is longer than one block of {block} code steps")
    return out


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneSchedule:
    epochs: int = 10
    lr: float = 1e-5
    critic_lr: float | None = None
    batch_size: int = 32
    alternation: int = 1  # critic steps per policy step
    stride: int | None = None
    seed: int = 0
    lr_decay: str = "constant"  # or "linear": policy and critic rates fall to zero over the run

    def __post_init__(self):
        if self.lr_decay not in ("constant", "linear"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")


@dataclass
class EpochRecord:
    epoch: int
    mean_rb: float
    mean_rc: float
    mean_r: float
    bas: float


@dataclass
class FinetuneResult:
    curve: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_rb", "mean_rc", "mean_r", "bas"])
        for e in self.curve:
            w.writerow([e.epoch, f"{e.mean_rb:.6f}", f"{e.mean_rc:.6f}", f"{e.mean_r:.6f}", f"{e.bas:.6f}"])
        return buf.getvalue()


class ActorCriticTrainer:
    def __init__(self, model: MotionGpt, critic: Critic, vq: tuple[VqVaeModel, VqVaeModel], split: HalfBodySplit,
                 episodes: Sequence[Episode], rewards: RewardConfig = RewardConfig(),
                 schedule: FinetuneSchedule = FinetuneSchedule()):
        if schedule.alternation < 1:
            raise ConfigError("alternation ratio must be >= 1")
        self.model, self.critic, self.vq, self.split = model, critic, vq, split
        self.episodes, self.rewards, self.schedule = list(episodes), rewards, schedule
        self.rng = np.random.default_rng([schedule.seed, 0xAC])
        self.policy_opt = nx.Adam(model.policy_parameters(), nx.AdamConfig(schedule.lr, 0.5, 0.99))
        clr = schedule.lr if schedule.critic_lr is None else schedule.critic_lr
        self.critic_opt = nx.Adam(critic.parameters(), nx.AdamConfig(clr, 0.5, 0.99))
        self.base_lr = (self.policy_opt.lr, self.critic_opt.lr)
        self.epoch = 0
        self.result = FinetuneResult()

    def _check(self, loss: Tensor, what: str) -> None:
        if not np.isfinite(loss.data):
            raise NumericalAbort(f"{what} became non-finite in epoch {self.epoch + 1}", {"epoch": self.epoch + 1})

    def batch_step(self, batch: Sequence[Episode]) -> RolloutTrace:
        music = np.stack([ep.music for ep in batch])
        start = np.array([ep.start for ep in batch])
        # Dropout stays off: the rollout, the rewards and the gradients all see the same policy.
        self.model.eval()
        self.critic.eval()
        codes = greedy_rollout(self.model, music, start)
        trace = score_trajectories(codes, batch, self.vq, self.split, self.rewards)
        T = music.shape[1]
        up, lo = codes[:, 0, :T], codes[:, 1, :T]
        with no_grad():
            s = self.model.state(music, up, lo)

        self.policy_opt.zero_grad()
        s_policy = ops.stop_gradient(s)
        au, al = split_actions(self.model.policy(s_policy))
        with no_grad():
            eps = td_error(trace.rewards, critic_values(self.critic, s))
        loss = ac_loss(au, al, eps)
        self._check(loss, "actor loss")
        loss.backward()
        self.policy_opt.step()

        for _ in range(self.schedule.alternation):
            self.critic_opt.zero_grad()
            lv = critic_loss(td_error(trace.rewards, critic_values(self.critic, s)))
            self._check(lv, "critic loss")
            lv.backward()
            self.critic_opt.step()
        return trace

    def run_epoch(self) -> EpochRecord:
        if self.schedule.lr_decay == "linear":
            scale = 1.0 - self.epoch / max(self.schedule.epochs, 1)
            self.policy_opt.lr, self.critic_opt.lr = (lr * scale for lr in self.base_lr)
        order = self.rng.permutation(len(self.episodes))
        traces = []
        for i in range(0, len(order), self.schedule.batch_size):
            traces.append(self.batch_step([self.episodes[j] for j in order[i : i + self.schedule.batch_size]]))
        self.epoch += 1
        rec = EpochRecord(
            self.epoch,
            float(np.mean(np.concatenate([t.beat_rewards.ravel() for t in traces]))),
            float(np.mean(np.concatenate([t.consistency_rewards.ravel() for t in traces]))),
            float(np.mean(np.concatenate([t.rewards.ravel() for t in traces]))),
            float(np.mean(np.concatenate([t.bas for t in traces]))),
        )
        self.result.curve.append(rec)
        log.info("ac epoch %d R_b %.3f R_c %.3f R %.3f BAS %.3f", rec.epoch, rec.mean_rb, rec.mean_rc, rec.mean_r, rec.bas)
        return rec

    def run(self) -> FinetuneResult:
        while self.epoch < self.schedule.epochs:
            self.run_epoch()
        return self.result


def finetune(model: MotionGpt, critic: Critic, vq: tuple[VqVaeModel, VqVaeModel], split: HalfBodySplit,
             episodes: Sequence[Episode], rewards: RewardConfig = RewardConfig(),
             schedule: FinetuneSchedule = FinetuneSchedule()) -> FinetuneResult:
    return ActorCriticTrainer(model, critic, vq, split, episodes, rewards, schedule).run()


def generated_bas(model: MotionGpt, vq: tuple[VqVaeModel, VqVaeModel], split: HalfBodySplit,
                  music: Sequence[CodeStepFeatures], music_beats: Sequence[np.ndarray],
                  starts: Sequence[tuple[int, int]]) -> float:
    """Mean Beat Align Score of full-length greedy generations against their music."""
    scores = []
    for m, beats, start in zip(music, music_beats, starts):
        codes = generate(model, m, start, len(m))
        motion = decode_codes(vq[0], vq[1], codes, split)
        beats = np.asarray(beats)
        beats = beats[beats < motion.num_frames]
        scores.append(beat_align_score(extract_dance_beats(motion), beats))
    return float(np.mean(scores))
