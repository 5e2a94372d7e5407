"""``choreo`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration or stage-order error, 3 data or I/O
error, 4 numerical abort (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import PROFILES, PipelineConfig, load_config
from .errors import ConfigError, DataError, NumericalAbort
from .motion import MotionSequence, read_beats, read_motion, write_beats, write_motion
from .music import read_features

log = logging.getLogger("choreo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _parse_set(items: list[str]) -> dict:
    """``section.key=value`` pairs (values parsed as JSON, else kept as strings)."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = path.split(".")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


def _config(args) -> PipelineConfig:
    overrides = _parse_set(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides, args.profile)
    log.info("config hash %s", cfg.hash())
    log.debug("resolved config:\n%s", cfg.to_json())
    return cfg


def _write_config_copy(cfg: PipelineConfig, out_dir) -> None:
    Path(out_dir, "config.json").write_text(cfg.to_json() + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    cfg = _config(args)
    corpus = pl.synthesize_corpus(cfg, args.num, args.corpus_seed)
    pl.write_corpus(corpus, args.out, cfg.hash())
    print(f"wrote {len(corpus)} sequences to {args.out}")
    return EXIT_OK


def cmd_train_vqvae(args) -> int:
    cfg = _config(args)
    corpus = pl.read_corpus(args.corpus)
    rows = pl.train_vqvae_stage(cfg, corpus, args.ckpt_dir, args.resume, args.stop_after)
    out = Path(args.ckpt_dir)
    for half, r in rows.items():
        pl.write_csv(out / f"vqvae_{half}_metrics.csv", ["step", "loss", "rec"], r)
        if r:
            print(f"{half}: step {r[-1][0]} loss {r[-1][1]:.5f} rec {r[-1][2]:.5f}")
    _write_config_copy(cfg, out)
    return EXIT_OK


def cmd_train_gpt(args) -> int:
    cfg = _config(args)
    corpus = pl.read_corpus(args.corpus)
    rows = pl.train_gpt_stage(cfg, corpus, args.ckpt_dir, args.resume, args.stop_after)
    pl.write_csv(Path(args.ckpt_dir) / "gpt_metrics.csv", ["step", "loss", "accuracy"], rows)
    if rows:
        print(f"gpt: step {rows[-1][0]} loss {rows[-1][1]:.5f} accuracy {rows[-1][2]:.3f}")
    return EXIT_OK


def cmd_finetune_ac(args) -> int:
    cfg = _config(args)
    corpus = pl.read_corpus(args.corpus)
    curve = pl.finetune_stage(cfg, corpus, args.ckpt_dir, args.resume, args.stop_after)
    header = ["epoch", "mean_rb", "mean_rc", "mean_r", "bas"]
    pl.write_csv(Path(args.ckpt_dir) / "ac_rewards.csv", header, [[r[k] for k in header] for r in curve])
    for r in curve:
        print(f"epoch {r['epoch']}: R {r['mean_r']:.4f} BAS {r['bas']:.4f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    beats_path = Path(args.beats) if args.beats else Path(args.music).with_suffix(".beats.json")
    beats = read_beats(beats_path) if beats_path.exists() else None
    track = read_features(args.music, beats)
    start = None if args.start is None else (args.start[0], args.start[1])
    gen = pl.generate_dance(args.ckpt_dir, track, args.length, start, args.seed or 0, args.policy)
    write_motion(args.out, gen.motion)
    trace = Path(args.out).with_suffix(".codes.json")
    pl.write_code_trace(trace, gen)
    if beats is not None:
        # music beats inside the generated span, for ``evaluate``'s beat alignment
        write_beats(Path(args.out).with_suffix(".beats.json"), beats[beats < gen.motion.num_frames])
    print(f"wrote {gen.motion.num_frames} frames to {args.out} (codes in {trace})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    for d in (args.generated, args.reference):
        if not Path(d).is_dir():
            raise DataError(f"{d}: not a directory")
    report = pl.evaluate_dirs(args.generated, args.reference, cfg)
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
        if args.csv:
            Path(args.csv).write_text(report.to_csv())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect_codebook(args) -> int:
    model, split, _ = pl.load_vq_model(args.checkpoint)
    N = model.config.num_codes
    codes = range(N) if args.code == "all" else [int(args.code)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for c in codes:
        poses = pl.single_code_motion(model, c, args.steps)
        write_motion(out / f"code{c:04d}.motn", MotionSequence(poses, 60.0, f"{model.half}{poses.shape[1]}"))
        rows.append((c, int(model.usage[c]), pl.interior_displacement(poses, model.boundary_frames())))
    pl.write_csv(out / "codebook.csv", ["code", "usage", "interior_displacement"], rows)
    print(f"decoded {len(rows)} code(s) to {out}")
    return EXIT_OK


def cmd_export_anim(args) -> int:
    motion = read_motion(args.motion)
    rows = pl.export_rows(motion)
    out = Path(args.out) if args.out else Path(args.motion).with_suffix("." + args.format)
    if args.format == "csv":
        pl.write_csv(out, ["frame", "joint", "x", "y", "z"], rows)
    else:
        data = {"fps": motion.fps, "columns": ["frame", "joint", "x", "y", "z"], "rows": [list(r) for r in rows]}
        out.write_text(json.dumps(data) + "\n")
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="JSON config file (profile defaults fill the rest)")
    p.add_argument("--profile", choices=sorted(PROFILES), help="built-in defaults to start from")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    if seed:
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")


def _training(p: argparse.ArgumentParser) -> None:
    _common(p)
    p.add_argument("--corpus", required=True, help="corpus directory written by gen-synth")
    p.add_argument("--ckpt-dir", required=True, help="directory holding the stage checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from this stage's checkpoint if present")
    p.add_argument("--stop-after", type=int, help="stop (and checkpoint) after this many steps/epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="choreo", description="Music-to-dance pipeline on pose codes.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic motion/music corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, help="number of sequences (default from config)")
    p.add_argument("--corpus-seed", type=int, help="seed for this corpus only (e.g. a held-out split)")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-vqvae", help="train the upper/lower pose VQ-VAEs")
    _training(p)
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("train-gpt", help="train the motion GPT on the encoded corpus")
    _training(p)
    p.set_defaults(func=cmd_train_gpt)

    p = sub.add_parser("finetune-ac", help="actor-critic finetuning of the motion GPT")
    _training(p)
    p.set_defaults(func=cmd_finetune_ac)

    p = sub.add_parser("generate", help="generate a dance for a music feature file")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--music", required=True, help=".mfeat file")
    p.add_argument("--length", type=int, required=True, help="number of code steps")
    p.add_argument("--start", type=int, nargs=2, metavar=("UPPER", "LOWER"), help="starting code pair")
    p.add_argument("--seed", type=int, help="draws the starting codes when --start is absent")
    p.add_argument("--policy", choices=("finetuned", "pretrained"), default="finetuned")
    p.add_argument("--beats", help="music beat JSON (default: <music>.beats.json when present)")
    p.add_argument("--out", required=True, help="output .motn file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="FID / diversity / BAS report")
    _common(p, seed=False)
    p.add_argument("--generated", required=True, help="directory of generated .motn (+ .beats.json music beats)")
    p.add_argument("--reference", required=True, help="directory of reference .motn files")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--csv", help="per-sequence CSV path (with --out)")
    p.set_defaults(func=cmd_evaluate, seed=None)

    p = sub.add_parser("inspect-codebook", help="decode single codes of a VQ-VAE checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--code", default="all", help="code index or 'all'")
    p.add_argument("--steps", type=int, default=16, help="repetitions of the code (T')")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_codebook)

    p = sub.add_parser("export-anim", help="dump joint trajectories as CSV or JSON")
    p.add_argument("motion")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_anim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: numerical abort: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
