"""Pipeline configuration: one JSON file with a section per stage.

Unknown keys are rejected at every level. Two built-in profiles exist:
``desk`` (small enough to train on one CPU core in minutes) and ``paper``
(the full-scale published hyperparameters).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .actor_critic import FinetuneSchedule, RewardConfig
from .errors import ConfigError
from .gpt import GptConfig, GptTrainSchedule
from .metrics import EvalConfig
from .motion import SyntheticCorpusSpec
from .vqvae import VqLossWeights, VqTrainSchedule, VqVaeConfig


@dataclass
class CorpusSection:
    num_sequences: int = 16
    frames: int = 240
    joints: int = 24
    fps: float = 60.0
    tempo_range: tuple[float, float] = (100.0, 140.0)
    amplitude_range: tuple[float, float] = (0.1, 0.5)
    harmonic: float = 0.2
    feature_dim: int = 438
    music_noise: float = 0.1
    beat_shift: float = 0.0  # in beats; non-zero builds deliberately misaligned music


@dataclass
class VqSection:
    num_codes: int = 32
    code_dim: int = 32
    downsample: int = 8
    width: int | None = None
    beta: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 1.0
    norm: str = "mse"
    steps: int = 2000
    batch_size: int = 16
    crop: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    velocity_steps: int = 500
    dead_code_reset: bool = True
    dead_code_interval: int | None = 50
    init_from_data: bool = True


@dataclass
class GptSection:
    layers: int = 4
    heads: int = 4
    channels: int = 128
    dropout: float = 0.1
    block_size: int = 8
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.99
    decay_at: float = 0.5
    decay: float = 0.1
    cross_conditional: bool = True


@dataclass
class ActorCriticSection:
    gamma_b: float = 5.0
    gamma_c: float = 1.0
    lr: float = 2e-4  # desk scale; the paper profile uses 1e-5 without decay
    critic_lr: float | None = None
    epochs: int = 10
    batch_size: int = 16
    alternation: int = 1
    stride: int | None = None
    lr_decay: str = "linear"


@dataclass
class EvalSection:
    sigma: float = 3.0
    smooth_window: int = 5
    min_gap_seconds: float = 0.25


SECTIONS = {
    "corpus": CorpusSection,
    "vqvae": VqSection,
    "gpt": GptSection,
    "actor_critic": ActorCriticSection,
    "eval": EvalSection,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    profile: str = "desk"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    vqvae: VqSection = field(default_factory=VqSection)
    gpt: GptSection = field(default_factory=GptSection)
    actor_critic: ActorCriticSection = field(default_factory=ActorCriticSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        base = profile(data.get("profile", "desk"))
        return base.merged(data)

    def merged(self, data: dict) -> "PipelineConfig":
        """A copy with ``data`` (same nesting as the JSON file) layered on top."""
        top = {f.name for f in fields(self)}
        unknown = set(data) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        out = replace(self)
        for key, value in data.items():
            if key in SECTIONS:
                setattr(out, key, _merge_section(getattr(self, key), value, key))
            elif key == "seed":
                if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                    raise ConfigError("seed must be a non-negative integer")
                out.seed = value
            elif key == "profile":
                if value not in PROFILES:
                    raise ConfigError(f"unknown profile {value!r}; choose from {sorted(PROFILES)}")
                out.profile = value
        out.validate()
        return out

    def validate(self) -> None:
        # Building every stage config runs their own checks.
        self.corpus_spec()
        self.vq_config()
        self.vq_weights()
        self.gpt_config()
        self.reward_config()
        self.finetune_schedule()
        if self.vqvae.crop % self.vqvae.downsample:
            raise ConfigError("VQ-VAE crop must be a multiple of the downsampling rate")

    # -- stage configs --------------------------------------------------------

    def corpus_spec(self, num_sequences: int | None = None, seed: int | None = None) -> SyntheticCorpusSpec:
        c = self.corpus
        return SyntheticCorpusSpec(
            num_sequences=c.num_sequences if num_sequences is None else num_sequences,
            T=c.frames,
            J=c.joints,
            fps=c.fps,
            tempo_range=tuple(c.tempo_range),
            seed=self.seed if seed is None else seed,
            amplitude_range=tuple(c.amplitude_range),
            harmonic=c.harmonic,
        )

    def vq_config(self) -> VqVaeConfig:
        v = self.vqvae
        return VqVaeConfig(v.num_codes, v.code_dim, v.downsample, v.width)

    def vq_weights(self) -> VqLossWeights:
        v = self.vqvae
        return VqLossWeights(v.beta, v.alpha1, v.alpha2, v.norm)

    def vq_schedule(self) -> VqTrainSchedule:
        v = self.vqvae
        return VqTrainSchedule(
            steps=v.steps, batch_size=v.batch_size, crop=v.crop, lr=v.lr, beta1=v.beta1, beta2=v.beta2,
            seed=self.seed, velocity_steps=v.velocity_steps, dead_code_reset=v.dead_code_reset,
            dead_code_interval=v.dead_code_interval, init_from_data=v.init_from_data,
        )  # fmt: skip

    def gpt_config(self) -> GptConfig:
        g = self.gpt
        return GptConfig(
            g.layers, g.heads, g.channels, g.dropout, g.block_size, self.vqvae.num_codes, self.corpus.feature_dim,
            g.cross_conditional,
        )

    def gpt_schedule(self) -> GptTrainSchedule:
        g = self.gpt
        return GptTrainSchedule(
            steps=g.steps, batch_size=g.batch_size, lr=g.lr, beta1=g.beta1, beta2=g.beta2,
            decay_at=g.decay_at, decay=g.decay, seed=self.seed,
        )  # fmt: skip

    def reward_config(self) -> RewardConfig:
        a = self.actor_critic
        return RewardConfig(a.gamma_b, a.gamma_c, self.vqvae.downsample)

    def finetune_schedule(self) -> FinetuneSchedule:
        a = self.actor_critic
        return FinetuneSchedule(
            epochs=a.epochs, lr=a.lr, critic_lr=a.critic_lr, batch_size=a.batch_size,
            alternation=a.alternation, stride=a.stride, seed=self.seed, lr_decay=a.lr_decay,
        )  # fmt: skip

    def eval_config(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(e.sigma, e.smooth_window, e.min_gap_seconds)


def _merge_section(current, value, name: str):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(current)}
    unknown = set(value) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    updates = {}
    for key, v in value.items():
        default = getattr(current, key)
        if isinstance(default, tuple):
            if not isinstance(v, (list, tuple)) or len(v) != len(default):
                raise ConfigError(f"{name}.{key} must be a list of {len(default)} numbers")
            v = tuple(float(x) for x in v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{name}.{key} must be true or false")
        elif isinstance(default, str):
            if not isinstance(v, str):
                raise ConfigError(f"{name}.{key} must be a string")
        elif isinstance(default, (int, float)) and not isinstance(default, bool) and v is not None:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            if isinstance(default, int) and not isinstance(v, int):
                raise ConfigError(f"{name}.{key} must be an integer")
            if isinstance(default, float):
                v = float(v)
        updates[key] = v
    return replace(current, **updates)


def desk_profile() -> PipelineConfig:
    return PipelineConfig()


def paper_profile() -> PipelineConfig:
    return PipelineConfig(
        profile="paper",
        corpus=CorpusSection(num_sequences=64, frames=480),
        vqvae=VqSection(
            num_codes=512, code_dim=512, steps=100000, batch_size=32, crop=240, lr=3e-5,
            dead_code_interval=None, velocity_steps=20000,
        ),  # fmt: skip
        gpt=GptSection(layers=12, heads=12, channels=768, block_size=29, steps=100000, batch_size=32),
        actor_critic=ActorCriticSection(lr=1e-5, epochs=10, batch_size=32, lr_decay="constant"),
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def profile(name: str) -> PipelineConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name]()


def load_config(path=None, overrides: dict | None = None, profile_name: str | None = None) -> PipelineConfig:
    """Profile defaults, then the file, then explicit overrides (flags win)."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    name = profile_name or data.get("profile", "desk")
    cfg = profile(name).merged({k: v for k, v in data.items() if k != "profile"})
    if overrides:
        cfg = cfg.merged(overrides)
    return cfg
