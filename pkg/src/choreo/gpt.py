"""Cross-conditional motion GPT over paired upper/lower pose codes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .music import CodeStepFeatures
from .numerics import ops
from .numerics.tensor import NumericalAbort, Tensor, no_grad
from .vqvae import CodeSequence

log = logging.getLogger(__name__)

MASKED_LOGIT = -1e9


@dataclass(frozen=True)
class GptConfig:
    layers: int = 12
    heads: int = 12
    channels: int = 768
    dropout: float = 0.1
    block_size: int = 29  # T'
    num_codes: int = 512
    music_dim: int = 438
    cross_conditional: bool = True  # False: the two halves never see each other (ablation)

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError("channel dimension must be divisible by the number of heads")
        if self.block_size < 2:
            raise ConfigError("block size must be at least 2")
        if self.layers < 1:
            raise ConfigError("need at least one transformer layer")


def build_mask(steps: int, cross: bool = True) -> np.ndarray:
    """Boolean (3T, 3T) cross-conditional causal mask.

    Rows and columns are laid out as [music | upper | lower] blocks of ``steps``
    positions; position (b, t) may attend to (b', t') iff ``t' <= t``.
    With ``cross=False`` music attends only to music and each half body only
    to music and itself, i.e. two single-body models sharing weights.
    """
    if steps < 1:
        raise ConfigError("mask needs at least one step")
    t = np.tile(np.arange(steps), 3)
    allowed = t[None, :] <= t[:, None]
    if not cross:
        b = np.repeat(np.arange(3), steps)
        allowed &= (b[None, :] == b[:, None]) | (b[None, :] == 0)
    return allowed


def additive_mask(allowed: np.ndarray) -> np.ndarray:
    return np.where(allowed, 0.0, MASKED_LOGIT)


class CrossConditionalAttention(nx.Module):
    def __init__(self, config: GptConfig, rng: np.random.Generator, dropout_rng: np.random.Generator):
        C = config.channels
        self.heads = config.heads
        self.dropout = config.dropout
        self.qkv = nx.Linear(C, 3 * C, rng, std=0.02)
        self.proj = nx.Linear(C, C, rng, std=0.02 / math.sqrt(2 * config.layers))
        self._rng = dropout_rng

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, L, C = x.shape
        H = self.heads
        qkv = self.qkv(x).reshape(B, L, 3, H, C // H).transpose(2, 0, 3, 1, 4)
        y = ops.attention(qkv[0], qkv[1], qkv[2], mask, self.dropout, self.training, self._rng)
        y = y.transpose(0, 2, 1, 3).reshape(B, L, C)
        return ops.dropout(self.proj(y), self.dropout, self.training, self._rng)


class Block(nx.Module):
    """Pre-LN transformer layer: LN -> masked attention -> residual -> LN -> MLP -> residual."""

    def __init__(self, config: GptConfig, rng: np.random.Generator, dropout_rng: np.random.Generator):
        C = config.channels
        self.ln1 = nx.LayerNorm(C)
        self.attn = CrossConditionalAttention(config, rng, dropout_rng)
        self.ln2 = nx.LayerNorm(C)
        self.fc1 = nx.Linear(C, 4 * C, rng, std=0.02)
        self.fc2 = nx.Linear(4 * C, C, rng, std=0.02 / math.sqrt(2 * config.layers))
        self.dropout = config.dropout
        self._rng = dropout_rng

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        h = self.fc2(ops.gelu(self.fc1(self.ln2(x))))
        return x + ops.dropout(h, self.dropout, self.training, self._rng)


class MotionGpt(nx.Module):
    def __init__(self, config: GptConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 0xD0])
        self.config = config
        C, T = config.channels, config.block_size
        self.upper_embedding = nx.Embedding(config.num_codes, C, rng)
        self.lower_embedding = nx.Embedding(config.num_codes, C, rng)
        self.music_proj = nx.Linear(config.music_dim, C, rng, std=0.02)
        self.pos_embedding = nx.parameter(np.zeros((3 * T, C)))
        self.blocks = [Block(config, rng, self.dropout_rng) for _ in range(config.layers)]
        self.ln_f = nx.LayerNorm(C)
        self.head = nx.Linear(C, config.num_codes, rng, bias=False, std=0.02)

    @property
    def state_layers(self) -> int:
        return self.config.layers // 2

    def _check_inputs(self, music, upper, lower):
        music = np.asarray(music.data if isinstance(music, Tensor) else music)
        upper, lower = np.asarray(upper, dtype=np.int64), np.asarray(lower, dtype=np.int64)
        if music.ndim == 2:
            music, upper, lower = music[None], upper[None], lower[None]
        T = upper.shape[1]
        if T > self.config.block_size:
            raise ConfigError(f"sequence of {T} steps exceeds block size {self.config.block_size}")
        if lower.shape != upper.shape or music.shape[:2] != upper.shape:
            raise ConfigError("music, upper and lower inputs must cover the same steps")
        if music.shape[2] != self.config.music_dim:
            raise ConfigError(f"expected {self.config.music_dim} music features, got {music.shape[2]}")
        return music, upper, lower

    def embed(self, music, upper, lower) -> tuple[Tensor, np.ndarray]:
        music, upper, lower = self._check_inputs(music, upper, lower)
        T = upper.shape[1]
        m = self.music_proj(Tensor(music.astype(self.head.weight.dtype)))
        x = ops.concat([m, self.upper_embedding(upper), self.lower_embedding(lower)], axis=1)
        positions = np.concatenate([np.arange(T) + b * self.config.block_size for b in range(3)])
        x = x + ops.embedding(self.pos_embedding, positions)
        x = ops.dropout(x, self.config.dropout, self.training, self.dropout_rng)
        return x, additive_mask(build_mask(T, self.config.cross_conditional))

    def state(self, music, upper, lower) -> Tensor:
        """Output of the first half of the layers (the state network)."""
        x, mask = self.embed(music, upper, lower)
        for block in self.blocks[: self.state_layers]:
            x = block(x, mask)
        return x

    def policy(self, s: Tensor) -> Tensor:
        """Remaining layers + head: states -> (B, 3T, N) logits."""
        T = s.shape[1] // 3
        mask = additive_mask(build_mask(T, self.config.cross_conditional))
        x = s
        for block in self.blocks[self.state_layers :]:
            x = block(x, mask)
        return self.head(self.ln_f(x))

    def forward(self, music, upper, lower) -> Tensor:
        return self.policy(self.state(music, upper, lower))

    def state_parameters(self) -> dict[str, Tensor]:
        keep = ("upper_embedding.", "lower_embedding.", "music_proj.", "pos_embedding")
        state_blocks = tuple(f"blocks.{i}." for i in range(self.state_layers))
        return {k: v for k, v in self.parameters().items() if k.startswith(keep + state_blocks)}

    def policy_parameters(self) -> dict[str, Tensor]:
        state = self.state_parameters()
        return {k: v for k, v in self.parameters().items() if k not in state}


def split_actions(logits: Tensor) -> tuple[Tensor, Tensor]:
    """Upper and lower action logits: rows [T, 2T) and [2T, 3T)."""
    T = logits.shape[1] // 3
    return logits[:, T : 2 * T], logits[:, 2 * T :]


def probabilities(logits: Tensor) -> np.ndarray:
    return ops.softmax(logits.detach(), axis=-1).data


def ce_loss(a_upper: Tensor, a_lower: Tensor, target_upper, target_lower) -> Tensor:
    """Mean over steps (and batch) of the summed upper + lower cross-entropies."""
    return ops.cross_entropy(a_upper, target_upper) + ops.cross_entropy(a_lower, target_lower)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate(
    model: MotionGpt,
    music: CodeStepFeatures | np.ndarray,
    start: tuple[int, int],
    length: int,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
) -> CodeSequence:
    """Autoregressive decoding; greedy argmax unless ``temperature > 0``.

    Code ``t`` is predicted from codes ``[w, t)`` and music rows ``[w+1, t]``.
    Once more than ``T'`` codes exist, the window keeps the latest ``T' - 1``.
    """
    feats = music.features if isinstance(music, CodeStepFeatures) else np.asarray(music)
    d = music.step if isinstance(music, CodeStepFeatures) else 8
    if length < 1:
        raise ConfigError("generation length must be >= 1")
    if feats.shape[0] < length:
        raise ConfigError(f"music covers {feats.shape[0]} code steps, fewer than the requested {length}")
    if temperature > 0 and rng is None:
        raise ConfigError("sampling needs an explicit generator")
    N = model.config.num_codes
    if not (0 <= start[0] < N and 0 <= start[1] < N):
        raise ConfigError("start codes out of range")
    block = model.config.block_size
    upper, lower = [int(start[0])], [int(start[1])]
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for t in range(1, length):
                w = 0 if t <= block else t - (block - 1)
                logits = model(feats[w + 1 : t + 1][None], np.array([upper[w:t]]), np.array([lower[w:t]]))
                au, al = split_actions(logits)
                picks = []
                for a in (au.data[0, -1], al.data[0, -1]):
                    if temperature > 0:
                        p = np.exp((a - a.max()) / temperature)
                        picks.append(int(rng.choice(N, p=p / p.sum())))
                    else:
                        picks.append(int(np.argmax(a)))
                upper.append(picks[0])
                lower.append(picks[1])
    finally:
        model.train(was_training)
    return CodeSequence(np.array(upper), np.array(lower), d)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GptTrainSchedule:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.99
    decay_at: float = 0.5  # fraction of steps after which lr is multiplied by decay
    decay: float = 0.1
    seed: int = 0
    log_every: int = 100


@dataclass
class GptTrainResult:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def _window_arrays(codes: Sequence[CodeSequence], music: Sequence[CodeStepFeatures], block: int):
    """Every (start) window: inputs p[s:s+T], targets p[s+1:s+T+1], music m[s+1:s+T+1]."""
    if len(codes) != len(music):
        raise ConfigError("code corpus and music corpus differ in size")
    index = []
    for i, (c, m) in enumerate(zip(codes, music)):
        n = min(len(c), len(m))
        if n < 2:
            raise ConfigError(f"sequence {i} is too short for training")
        T = min(block, n - 1)
        index.extend((i, s, T) for s in range(n - T))
    lengths = {T for _, _, T in index}
    if len(lengths) != 1:
        T = min(lengths)
        index = [(i, s, T) for i, s, _ in index]
    return index


def make_batch(codes, music, windows):
    mu, up, lo, tu, tl = [], [], [], [], []
    for i, s, T in windows:
        c, m = codes[i], music[i]
        feats = m.features if isinstance(m, CodeStepFeatures) else m
        mu.append(feats[s + 1 : s + T + 1])
        up.append(c.upper[s : s + T])
        lo.append(c.lower[s : s + T])
        tu.append(c.upper[s + 1 : s + T + 1])
        tl.append(c.lower[s + 1 : s + T + 1])
    return np.stack(mu), np.stack(up), np.stack(lo), np.stack(tu), np.stack(tl)


def next_code_accuracy(model: MotionGpt, codes, music) -> float:
    """Teacher-forced argmax accuracy over every training window (eval mode)."""
    windows = _window_arrays(codes, music, model.config.block_size)
    was = model.training
    model.eval()
    hits = total = 0
    with no_grad():
        for start in range(0, len(windows), 64):
            mu, up, lo, tu, tl = make_batch(codes, music, windows[start : start + 64])
            au, al = split_actions(model(mu, up, lo))
            hits += int((au.data.argmax(-1) == tu).sum() + (al.data.argmax(-1) == tl).sum())
            total += tu.size + tl.size
    model.train(was)
    return hits / max(total, 1)


class GptTrainer:
    def __init__(self, model: MotionGpt, codes: Sequence[CodeSequence], music: Sequence[CodeStepFeatures],
                 schedule: GptTrainSchedule):
        if not codes:
            raise ConfigError("empty code corpus")
        self.model, self.codes, self.music, self.schedule = model, list(codes), list(music), schedule
        for c in self.codes:
            c.validate(model.config.num_codes)
        self.windows = _window_arrays(self.codes, self.music, model.config.block_size)
        self.rng = np.random.default_rng([schedule.seed, 0x6770])
        self.optimizer = nx.Adam(model.parameters(), nx.AdamConfig(schedule.lr, schedule.beta1, schedule.beta2))
        self.step = 0
        self.result = GptTrainResult()

    def train_step(self) -> float:
        s = self.schedule
        self.model.train()
        pick = self.rng.integers(0, len(self.windows), size=s.batch_size)
        mu, up, lo, tu, tl = make_batch(self.codes, self.music, [self.windows[i] for i in pick])
        self.optimizer.lr = s.lr * (s.decay if self.step >= s.decay_at * s.steps else 1.0)
        self.optimizer.zero_grad()
        au, al = split_actions(self.model(mu, up, lo))
        loss = ce_loss(au, al, tu, tl)
        if not np.isfinite(loss.data):
            raise NumericalAbort(f"GPT loss became non-finite at step {self.step + 1}", {"step": self.step + 1})
        loss.backward()
        self.optimizer.step()
        self.step += 1
        acc = float(((au.data.argmax(-1) == tu).mean() + (al.data.argmax(-1) == tl).mean()) / 2)
        self.result.loss.append(float(loss.data))
        self.result.accuracy.append(acc)
        if s.log_every and self.step % s.log_every == 0:
            log.info("gpt step %d loss %.4f acc %.3f", self.step, float(loss.data), acc)
        return float(loss.data)

    def run(self) -> GptTrainResult:
        while self.step < self.schedule.steps:
            self.train_step()
        return self.result


def train_gpt(model: MotionGpt, codes: Sequence[CodeSequence], music: Sequence[CodeStepFeatures],
              schedule: GptTrainSchedule = GptTrainSchedule()) -> GptTrainResult:
    return GptTrainer(model, codes, music, schedule).run()
