"""Stage orchestration on disk: corpus directories, checkpoints for each
trained stage and the generation path from music to a decoded dance.

Every function here is deterministic given the config's seed, so re-running
a stage reproduces its files byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ck
from .actor_critic import ActorCriticTrainer, Critic, make_episodes
from .config import PipelineConfig
from .errors import ConfigError, DataError
from .gpt import GptConfig, GptTrainer, MotionGpt, generate
from .metrics import EvalReport, evaluate_suite
from .motion import (
    HalfBodySplit,
    MotionSequence,
    default_split_for,
    generate_synthetic,
    read_beats,
    read_motion,
    write_beats,
    write_motion,
)
from .music import (
    CodeStepFeatures,
    MusicFeatureTrack,
    downsample_features,
    generate_synthetic_music,
    read_features,
    write_features,
)
from .vqvae import CodeSequence, VqTrainer, VqVaeConfig, VqVaeModel, decode_codes, encode_corpus_to_codes, half_body_data

log = logging.getLogger(__name__)

VQ_FILES = {"upper": "vqvae_upper.ckpt", "lower": "vqvae_lower.ckpt"}
GPT_FILE = "gpt.ckpt"
AC_FILE = "actor_critic.ckpt"
CODES_FILE = "codes.json"


# ---------------------------------------------------------------------------
# Corpus directories
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    ids: list[str]
    motions: list[MotionSequence]
    tracks: list[MusicFeatureTrack]  # beats attached

    def __len__(self) -> int:
        return len(self.ids)


def synthesize_corpus(cfg: PipelineConfig, num_sequences: int | None = None, seed: int | None = None) -> Corpus:
    spec = cfg.corpus_spec(num_sequences, seed)
    samples = generate_synthetic(spec)
    tracks = generate_synthetic_music(
        samples, cfg.corpus.feature_dim, seed=spec.seed, noise_scale=cfg.corpus.music_noise,
        beat_shift=cfg.corpus.beat_shift,
    )  # fmt: skip
    ids = [f"seq{i:04d}" for i in range(len(samples))]
    return Corpus(ids, [s.motion for s in samples], tracks)


def write_corpus(corpus: Corpus, out_dir, config_hash: str = "") -> None:
    out = Path(out_dir)
    if out.exists() and not out.is_dir():
        raise DataError(f"{out}: exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    for sid, motion, track in zip(corpus.ids, corpus.motions, corpus.tracks):
        write_motion(out / f"{sid}.motn", motion)
        write_features(out / f"{sid}.mfeat", track)
        write_beats(out / f"{sid}.beats.json", track.beats)
    manifest = {"sequences": corpus.ids, "config_hash": config_hash}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    path = root / "manifest.json"
    if not path.is_file():
        raise DataError(f"{root}: no corpus manifest (expected {path})")
    try:
        ids = json.loads(path.read_text())["sequences"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed corpus manifest ({exc})") from None
    motions, tracks = [], []
    for sid in ids:
        motions.append(read_motion(root / f"{sid}.motn"))
        beats_path = root / f"{sid}.beats.json"
        beats = read_beats(beats_path) if beats_path.exists() else None
        track = read_features(root / f"{sid}.mfeat", beats)
        if track.num_frames != motions[-1].num_frames:
            raise DataError(f"{sid}: music has {track.num_frames} frames but motion has {motions[-1].num_frames}")
        tracks.append(track)
    return Corpus(list(ids), motions, tracks)


def read_motion_dir(path) -> tuple[list[MotionSequence], list[np.ndarray | None]]:
    """All ``.motn`` files of a directory (sorted by name) and their beat sidecars."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    files = sorted(root.glob("*.motn"))
    motions, beats = [], []
    for f in files:
        motions.append(read_motion(f))
        side = f.with_name(f.stem + ".beats.json")
        beats.append(read_beats(side) if side.exists() else None)
    return motions, beats


# ---------------------------------------------------------------------------
# VQ-VAE stage
# ---------------------------------------------------------------------------


def _split_meta(split: HalfBodySplit) -> dict:
    return {"upper": list(split.upper), "lower": list(split.lower), "root_index": split.root_index}


def _split_from(meta: dict) -> HalfBodySplit:
    return HalfBodySplit(tuple(meta["upper"]), tuple(meta["lower"]), meta["root_index"])


def vq_checkpoint(trainer: VqTrainer, cfg: PipelineConfig, split: HalfBodySplit) -> ck.Checkpoint:
    m = trainer.model
    arrays = ck.prefixed("model.", m.state_dict())
    arrays.update(ck.prefixed("opt.", ck.optimizer_arrays(trainer.optimizer)))
    meta = {
        "half": m.half,
        "joint_count": m.joint_count,
        "vq_config": asdict(m.config),
        "split": _split_meta(split),
        "config_hash": cfg.hash(),
        "step": trainer.step,
        "velocity_step": trainer.velocity_step,
        "rng": ck.rng_state(trainer.rng),
        "usage": m.usage.tolist(),
        "usage_window": trainer.usage_window.tolist(),
        "opt": ck.optimizer_meta(trainer.optimizer),
        "resets": trainer.result.resets,
    }
    if trainer.velocity_optimizer is not None:
        arrays.update(ck.prefixed("vopt.", ck.optimizer_arrays(trainer.velocity_optimizer)))
        meta["vopt"] = ck.optimizer_meta(trainer.velocity_optimizer)
    return ck.Checkpoint("vqvae", arrays, meta)


def load_vq_model(path) -> tuple[VqVaeModel, HalfBodySplit, ck.Checkpoint]:
    c = ck.load(path, "vqvae")
    model = VqVaeModel(c.meta["half"], c.meta["joint_count"], VqVaeConfig(**c.meta["vq_config"]))
    model.load_state_dict(c.subset("model."))
    model.usage = np.asarray(c.meta["usage"], dtype=np.int64)
    return model, _split_from(c.meta["split"]), c


def load_vq_pair(ckpt_dir) -> tuple[VqVaeModel, VqVaeModel, HalfBodySplit]:
    root = Path(ckpt_dir)
    upper, split, _ = load_vq_model(root / VQ_FILES["upper"])
    lower, split_l, _ = load_vq_model(root / VQ_FILES["lower"])
    if split != split_l:
        raise DataError("upper and lower VQ-VAE checkpoints were trained with different splits")
    return upper, lower, split


def train_vqvae_stage(cfg: PipelineConfig, corpus: Corpus, ckpt_dir, resume: bool = False,
                      stop_after: int | None = None) -> dict[str, list[tuple]]:
    """Train (or resume) both half-body VQ-VAEs; returns per-step metric rows."""
    root = Path(ckpt_dir)
    root.mkdir(parents=True, exist_ok=True)
    if not corpus.motions:
        raise ConfigError("empty training corpus")
    J = corpus.motions[0].joint_count
    split = default_split_for(J)
    split.validate(J)
    rows = {}
    for half in ("upper", "lower"):
        path = root / VQ_FILES[half]
        poses, vels = half_body_data(corpus.motions, split, half)
        model = VqVaeModel(half, len(getattr(split, half)), cfg.vq_config(), seed=cfg.seed + (half == "lower"))
        trainer = VqTrainer(model, poses, vels if half == "lower" else None, cfg.vq_weights(), cfg.vq_schedule())
        if resume and path.exists():
            _restore_vq_trainer(trainer, ck.load(path, "vqvae"))
        s = trainer.schedule
        limit = s.steps if stop_after is None else min(s.steps, stop_after)
        while trainer.step < limit:
            loss = trainer.train_step()
            if s.log_every and trainer.step % s.log_every == 0:
                log.info("vqvae[%s] step %d loss %.5f rec %.5f", half, trainer.step, float(loss.total.data), loss.rec)
        if stop_after is None and trainer.velocity_optimizer is not None:
            while trainer.velocity_step < s.velocity_steps:
                trainer.velocity_step_once()
        ck.save(path, vq_checkpoint(trainer, cfg, split))
        first = trainer.step - len(trainer.result.loss) + 1
        rows[half] = list(zip(range(first, trainer.step + 1), trainer.result.loss, trainer.result.rec))
    return rows


def _restore_vq_trainer(trainer: VqTrainer, c: ck.Checkpoint) -> None:
    trainer.model.load_state_dict(c.subset("model."))
    trainer.model.usage = np.asarray(c.meta["usage"], dtype=np.int64)
    ck.restore_optimizer(trainer.optimizer, c.meta["opt"], c.subset("opt."))
    if trainer.velocity_optimizer is not None and "vopt" in c.meta:
        ck.restore_optimizer(trainer.velocity_optimizer, c.meta["vopt"], c.subset("vopt."))
    ck.restore_rng(trainer.rng, c.meta["rng"])
    trainer.step = int(c.meta["step"])
    trainer.velocity_step = int(c.meta["velocity_step"])
    trainer.usage_window = np.asarray(c.meta["usage_window"], dtype=np.int64)
    trainer.result.resets = int(c.meta["resets"])


# ---------------------------------------------------------------------------
# Code corpus
# ---------------------------------------------------------------------------


def encode_corpus(corpus: Corpus, upper: VqVaeModel, lower: VqVaeModel, split: HalfBodySplit) -> list[CodeSequence]:
    return [encode_corpus_to_codes(upper, lower, m, split) for m in corpus.motions]


def write_codes(path, ids: Sequence[str], codes: Sequence[CodeSequence]) -> None:
    data = {sid: {"upper": c.upper.tolist(), "lower": c.lower.tolist(), "d": c.d} for sid, c in zip(ids, codes)}
    Path(path).write_text(json.dumps(data, sort_keys=True) + "\n")


def read_codes(path) -> dict[str, CodeSequence]:
    try:
        data = json.loads(Path(path).read_text())
        return {k: CodeSequence(v["upper"], v["lower"], int(v["d"])) for k, v in data.items()}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed code corpus ({exc})") from None


def music_steps(corpus: Corpus, d: int) -> list[CodeStepFeatures]:
    return [downsample_features(t, d) for t in corpus.tracks]


# ---------------------------------------------------------------------------
# GPT stage
# ---------------------------------------------------------------------------


def _gpt_arrays(model: MotionGpt) -> dict[str, np.ndarray]:
    return ck.prefixed("model.", model.state_dict())


def gpt_checkpoint(trainer: GptTrainer, cfg: PipelineConfig, vq_hash: str) -> ck.Checkpoint:
    arrays = _gpt_arrays(trainer.model)
    arrays.update(ck.prefixed("opt.", ck.optimizer_arrays(trainer.optimizer)))
    meta = {
        "gpt_config": asdict(trainer.model.config),
        "config_hash": cfg.hash(),
        "vq_hash": vq_hash,
        "step": trainer.step,
        "rng": ck.rng_state(trainer.rng),
        "dropout_rng": ck.rng_state(trainer.model.dropout_rng),
        "opt": ck.optimizer_meta(trainer.optimizer),
    }
    return ck.Checkpoint("gpt", arrays, meta)


def load_gpt(path) -> tuple[MotionGpt, ck.Checkpoint]:
    c = ck.load(path, "gpt")
    model = MotionGpt(GptConfig(**c.meta["gpt_config"]))
    model.load_state_dict(c.subset("model."))
    ck.restore_rng(model.dropout_rng, c.meta["dropout_rng"])
    return model, c


def _vq_hash(ckpt_dir) -> str:
    import hashlib

    h = hashlib.sha256()
    for half in ("upper", "lower"):
        h.update((Path(ckpt_dir) / VQ_FILES[half]).read_bytes())
    return h.hexdigest()[:16]


def _prepare_codes(cfg: PipelineConfig, corpus: Corpus, ckpt_dir) -> tuple[list[CodeSequence], list[CodeStepFeatures]]:
    upper, lower, split = load_vq_pair(ckpt_dir)
    if upper.config.num_codes != cfg.vqvae.num_codes:
        raise ConfigError("VQ-VAE checkpoints do not match the configured codebook size")
    codes = encode_corpus(corpus, upper, lower, split)
    write_codes(Path(ckpt_dir) / CODES_FILE, corpus.ids, codes)
    music = music_steps(corpus, upper.d)
    for sid, t in zip(corpus.ids, corpus.tracks):
        if t.dim != cfg.corpus.feature_dim:
            raise DataError(f"{sid}: music has {t.dim} feature channels, config expects {cfg.corpus.feature_dim}")
    return codes, music


def train_gpt_stage(cfg: PipelineConfig, corpus: Corpus, ckpt_dir, resume: bool = False,
                    stop_after: int | None = None) -> list[tuple]:
    root = Path(ckpt_dir)
    for half in ("upper", "lower"):
        if not (root / VQ_FILES[half]).exists():
            ck.load(root / VQ_FILES[half], "vqvae")  # raises the stage-order error
    codes, music = _prepare_codes(cfg, corpus, root)
    model = MotionGpt(cfg.gpt_config(), seed=cfg.seed)
    trainer = GptTrainer(model, codes, music, cfg.gpt_schedule())
    path = root / GPT_FILE
    if resume and path.exists():
        c = ck.load(path, "gpt")
        model.load_state_dict(c.subset("model."))
        ck.restore_optimizer(trainer.optimizer, c.meta["opt"], c.subset("opt."))
        ck.restore_rng(trainer.rng, c.meta["rng"])
        ck.restore_rng(model.dropout_rng, c.meta["dropout_rng"])
        trainer.step = int(c.meta["step"])
    limit = trainer.schedule.steps if stop_after is None else min(trainer.schedule.steps, stop_after)
    while trainer.step < limit:
        trainer.train_step()
    ck.save(path, gpt_checkpoint(trainer, cfg, _vq_hash(root)))
    first = trainer.step - len(trainer.result.loss) + 1
    return list(zip(range(first, trainer.step + 1), trainer.result.loss, trainer.result.accuracy))


# ---------------------------------------------------------------------------
# Actor-critic stage
# ---------------------------------------------------------------------------


def ac_checkpoint(trainer: ActorCriticTrainer, cfg: PipelineConfig, gpt_meta: dict) -> ck.Checkpoint:
    arrays = _gpt_arrays(trainer.model)
    arrays.update(ck.prefixed("critic.", trainer.critic.state_dict()))
    arrays.update(ck.prefixed("popt.", ck.optimizer_arrays(trainer.policy_opt)))
    arrays.update(ck.prefixed("copt.", ck.optimizer_arrays(trainer.critic_opt)))
    meta = {
        "gpt_config": gpt_meta["gpt_config"],
        "config_hash": cfg.hash(),
        "vq_hash": gpt_meta["vq_hash"],
        "epoch": trainer.epoch,
        "rng": ck.rng_state(trainer.rng),
        "dropout_rng": ck.rng_state(trainer.model.dropout_rng),
        "critic_dropout_rng": ck.rng_state(trainer.critic.dropout_rng),
        "popt": ck.optimizer_meta(trainer.policy_opt),
        "copt": ck.optimizer_meta(trainer.critic_opt),
        "curve": [asdict(r) for r in trainer.result.curve],
    }
    return ck.Checkpoint("actor_critic", arrays, meta)


def load_policy(ckpt_dir, which: str = "finetuned") -> MotionGpt:
    root = Path(ckpt_dir)
    if which == "finetuned":
        c = ck.load(root / AC_FILE, "actor_critic")
        model = MotionGpt(GptConfig(**c.meta["gpt_config"]))
        model.load_state_dict(c.subset("model."))
        return model
    if which == "pretrained":
        return load_gpt(root / GPT_FILE)[0]
    raise ConfigError(f"unknown policy {which!r}; use 'finetuned' or 'pretrained'")


def finetune_stage(cfg: PipelineConfig, corpus: Corpus, ckpt_dir, resume: bool = False,
                   stop_after: int | None = None) -> list[dict]:
    root = Path(ckpt_dir)
    model, gc = load_gpt(root / GPT_FILE)
    upper, lower, split = load_vq_pair(root)
    if gc.meta["vq_hash"] != _vq_hash(root):
        raise DataError("GPT checkpoint was trained against different VQ-VAE checkpoints")
    codes, music = _prepare_codes(cfg, corpus, root)
    if any(t.beats.size == 0 for t in corpus.tracks):
        log.warning("some music tracks carry no beats; their beat-align reward is always +1")
    episodes = make_episodes(codes, music, [t.beats for t in corpus.tracks], model.config.block_size,
                             cfg.finetune_schedule().stride)
    critic = Critic(model.config, seed=cfg.seed)
    trainer = ActorCriticTrainer(model, critic, (upper, lower), split, episodes, cfg.reward_config(),
                                 cfg.finetune_schedule())
    path = root / AC_FILE
    if resume and path.exists():
        c = ck.load(path, "actor_critic")
        model.load_state_dict(c.subset("model."))
        critic.load_state_dict(c.subset("critic."))
        ck.restore_optimizer(trainer.policy_opt, c.meta["popt"], c.subset("popt."))
        ck.restore_optimizer(trainer.critic_opt, c.meta["copt"], c.subset("copt."))
        ck.restore_rng(trainer.rng, c.meta["rng"])
        ck.restore_rng(model.dropout_rng, c.meta["dropout_rng"])
        ck.restore_rng(critic.dropout_rng, c.meta["critic_dropout_rng"])
        trainer.epoch = int(c.meta["epoch"])
        from .actor_critic import EpochRecord

        trainer.result.curve = [EpochRecord(**r) for r in c.meta["curve"]]
    limit = trainer.schedule.epochs if stop_after is None else min(trainer.schedule.epochs, stop_after)
    while trainer.epoch < limit:
        trainer.run_epoch()
    ck.save(path, ac_checkpoint(trainer, cfg, gc.meta))
    return [asdict(r) for r in trainer.result.curve]


# ---------------------------------------------------------------------------
# Generation and evaluation
# ---------------------------------------------------------------------------


@dataclass
class Generation:
    motion: MotionSequence
    codes: CodeSequence
    start: tuple[int, int]


def generate_dance(ckpt_dir, track: MusicFeatureTrack, length: int, start: tuple[int, int] | None = None,
                   seed: int = 0, policy: str = "finetuned") -> Generation:
    """Music -> codes (GPT) -> quantized features -> decoded, root-integrated dance of ``length * d`` frames."""
    upper, lower, split = load_vq_pair(ckpt_dir)
    model = load_policy(ckpt_dir, policy)
    if track.dim != model.config.music_dim:
        raise DataError(f"music has {track.dim} feature channels, the model expects {model.config.music_dim}")
    music = downsample_features(track, upper.d)
    if len(music) < length:
        raise ConfigError(f"music covers {len(music)} code steps, fewer than the requested {length}")
    if start is None:
        rng = np.random.default_rng([seed, 0x57A7])
        start = tuple(int(x) for x in rng.integers(0, model.config.num_codes, size=2))
    codes = generate(model, music, start, length)
    codes = CodeSequence(codes.upper, codes.lower, upper.d, track.fps)
    motion = decode_codes(upper, lower, codes, split)
    return Generation(motion, codes, start)


def write_code_trace(path, gen: Generation) -> None:
    data = {"start": list(gen.start), "d": gen.codes.d, "upper": gen.codes.upper.tolist(),
            "lower": gen.codes.lower.tolist()}  # fmt: skip
    Path(path).write_text(json.dumps(data, sort_keys=True) + "\n")


def evaluate_dirs(generated_dir, reference_dir, cfg: PipelineConfig) -> EvalReport:
    gen, beats = read_motion_dir(generated_dir)
    ref, _ = read_motion_dir(reference_dir)
    music_beats = None if any(b is None for b in beats) or not beats else beats
    return evaluate_suite(gen, ref, music_beats, cfg.eval_config())


# ---------------------------------------------------------------------------
# Codebook inspection and export
# ---------------------------------------------------------------------------


def single_code_motion(model: VqVaeModel, code: int, steps: int) -> np.ndarray:
    """Decoded (steps*d, J_half, 3) root-relative poses for a code repeated ``steps`` times."""
    from .numerics.tensor import no_grad

    if not 0 <= code < model.config.num_codes:
        raise ConfigError(f"code index {code} outside [0, {model.config.num_codes})")
    with no_grad():
        out = model.decode_pose(model.embed_codes(np.full((1, steps), code))).data[0]
    return out.reshape(out.shape[0], -1, 3)


def interior_displacement(poses: np.ndarray, margin: int) -> float:
    """Max frame-to-frame joint displacement, ignoring ``margin`` frames at each end."""
    inner = poses[margin : poses.shape[0] - margin]
    if inner.shape[0] < 2:
        raise ConfigError("sequence too short to have interior frames")
    return float(np.abs(np.diff(inner, axis=0)).max())


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in r])  # 9 digits round-trip float32


def export_rows(motion: MotionSequence) -> list[tuple[int, int, float, float, float]]:
    T, J, _ = motion.frames.shape
    f = motion.frames
    return [(t, j, float(f[t, j, 0]), float(f[t, j, 1]), float(f[t, j, 2])) for t in range(T) for j in range(J)]


def import_rows(rows: Sequence[Sequence], fps: float = 60.0) -> MotionSequence:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise DataError("animation rows must have 5 columns: frame, joint, x, y, z")
    T, J = int(arr[:, 0].max()) + 1, int(arr[:, 1].max()) + 1
    if arr.shape[0] != T * J:
        raise DataError(f"expected {T * J} rows for T={T}, J={J}, got {arr.shape[0]}")
    frames = np.zeros((T, J, 3), dtype=np.float32)
    frames[arr[:, 0].astype(int), arr[:, 1].astype(int)] = arr[:, 2:]
    return MotionSequence(frames, fps)
