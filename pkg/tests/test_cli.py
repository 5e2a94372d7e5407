import json
import shutil

import numpy as np
import pytest

from choreo import checkpoint as ck
from choreo import pipeline as pl
from choreo.cli import main
from choreo.config import PipelineConfig, load_config
from choreo.errors import ConfigError, DataError
from choreo.motion import read_motion
from choreo.numerics import no_grad

TINY_CONFIG = {
    "corpus": {"num_sequences": 4, "frames": 64, "feature_dim": 16},
    "vqvae": {"num_codes": 8, "code_dim": 8, "steps": 6, "batch_size": 4, "crop": 32, "velocity_steps": 3,
              "dead_code_interval": 3},
    "gpt": {"layers": 2, "heads": 2, "channels": 16, "block_size": 4, "steps": 6, "batch_size": 4},
    "actor_critic": {"epochs": 2, "batch_size": 4, "stride": 2, "lr": 1e-3},
}  # fmt: skip


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    corpus, ckpt = root / "corpus", root / "ckpt"
    common = ["--config", str(cfg)]
    assert main(["gen-synth", *common, "--out", str(corpus)]) == 0
    for stage in ("train-vqvae", "train-gpt", "finetune-ac"):
        assert main([stage, *common, "--corpus", str(corpus), "--ckpt-dir", str(ckpt)]) == 0
    return root, common


def file_bytes(path):
    return path.read_bytes()


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_rejects_unknown_keys_and_bad_types(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig().merged({"vqvae": {"codes": 3}})
    with pytest.raises(ConfigError):
        PipelineConfig().merged({"nope": 1})
    with pytest.raises(ConfigError):
        PipelineConfig().merged({"gpt": {"layers": 2.5}})
    with pytest.raises(ConfigError):
        PipelineConfig().merged({"vqvae": {"crop": 60}})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_config_precedence_and_hash(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3, "gpt": {"layers": 2}}))
    cfg = load_config(tmp_path / "c.json", {"gpt": {"layers": 6}})
    assert cfg.seed == 3 and cfg.gpt.layers == 6 and cfg.gpt.heads == 4
    assert cfg.hash() != PipelineConfig().hash()
    assert PipelineConfig.from_dict(json.loads(cfg.to_json())).hash() == cfg.hash()
    paper = load_config(profile_name="paper")
    assert (paper.vqvae.num_codes, paper.gpt.layers, paper.gpt.block_size) == (512, 12, 29)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_is_byte_exact(tmp_path):
    rng = np.random.default_rng(0)
    c = ck.Checkpoint("demo", {"a": rng.normal(size=(3, 2)).astype(np.float32), "b": np.zeros(0, np.float32)},
                      {"step": 4, "note": "x"})  # fmt: skip
    ck.save(tmp_path / "one.ckpt", c)
    back = ck.load(tmp_path / "one.ckpt", "demo")
    ck.save(tmp_path / "two.ckpt", back)
    assert file_bytes(tmp_path / "one.ckpt") == file_bytes(tmp_path / "two.ckpt")
    assert back.arrays["a"].tobytes() == c.arrays["a"].tobytes() and back.meta == c.meta
    assert not list(tmp_path.glob(".*.tmp"))


def test_checkpoint_errors(tmp_path):
    raw = ck.encode(ck.Checkpoint("demo", {"a": np.ones(4, np.float32)}))
    with pytest.raises(DataError, match="byte offset"):
        ck.decode(raw[:-3])
    with pytest.raises(DataError, match="magic"):
        ck.decode(b"XXXX" + raw[4:])
    (tmp_path / "x.ckpt").write_bytes(raw)
    with pytest.raises(DataError):
        ck.load(tmp_path / "x.ckpt", "gpt")
    with pytest.raises(ConfigError):
        ck.load(tmp_path / "missing.ckpt", "gpt")


def test_pipeline_checkpoints_reload_byte_exact(run, tmp_path):
    root, _ = run
    for name in ("vqvae_upper.ckpt", "vqvae_lower.ckpt", "gpt.ckpt", "actor_critic.ckpt"):
        ck.save(tmp_path / name, ck.load(root / "ckpt" / name))
        assert file_bytes(tmp_path / name) == file_bytes(root / "ckpt" / name)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def test_pipeline_outputs(run):
    root, _ = run
    ckpt = root / "ckpt"
    for name in ("vqvae_upper_metrics.csv", "vqvae_lower_metrics.csv", "gpt_metrics.csv", "ac_rewards.csv", "config.json"):
        assert (ckpt / name).is_file(), name
    assert (ckpt / "ac_rewards.csv").read_text().splitlines()[0] == "epoch,mean_rb,mean_rc,mean_r,bas"
    assert len((ckpt / "ac_rewards.csv").read_text().splitlines()) == 3
    assert len(json.loads((root / "corpus" / "manifest.json").read_text())["sequences"]) == 4


def test_gen_synth_is_reproducible_and_handles_empty(run, tmp_path):
    root, common = run
    assert main(["gen-synth", *common, "--out", str(tmp_path / "again")]) == 0
    for f in sorted((root / "corpus").iterdir()):
        assert file_bytes(f) == file_bytes(tmp_path / "again" / f.name), f.name
    assert main(["gen-synth", *common, "--num", "0", "--out", str(tmp_path / "empty")]) == 0
    assert json.loads((tmp_path / "empty" / "manifest.json").read_text())["sequences"] == []
    (tmp_path / "file").write_text("x")
    assert main(["gen-synth", *common, "--out", str(tmp_path / "file")]) == 3


def test_stage_order_is_enforced(run, tmp_path):
    root, common = run
    corpus = str(root / "corpus")
    assert main(["finetune-ac", *common, "--corpus", corpus, "--ckpt-dir", str(tmp_path / "none")]) == 2
    assert main(["train-gpt", *common, "--corpus", corpus, "--ckpt-dir", str(tmp_path / "none")]) == 2
    assert main(["generate", "--ckpt-dir", str(tmp_path / "none"), "--music", str(root / "corpus" / "seq0000.mfeat"),
                 "--length", "4", "--out", str(tmp_path / "x.motn")]) == 2  # fmt: skip


def test_bad_config_exits_2(run, tmp_path):
    root, _ = run
    assert main(["gen-synth", "--set", "vqvae.bogus=1", "--out", str(tmp_path / "c")]) == 2


def test_stages_keep_earlier_weights_fixed(run):
    root, _ = run
    ckpt = root / "ckpt"
    vq = {h: ck.load(ckpt / f"vqvae_{h}.ckpt").subset("model.") for h in ("upper", "lower")}
    gpt = ck.load(ckpt / "gpt.ckpt")
    ac = ck.load(ckpt / "actor_critic.ckpt")
    # the GPT stage records a hash of the exact VQ-VAE files it trained against
    assert gpt.meta["vq_hash"] == pl._vq_hash(ckpt) == ac.meta["vq_hash"]
    model = pl.load_policy(ckpt, "pretrained")
    for k in model.state_parameters():
        assert gpt.arrays["model." + k].tobytes() == ac.arrays["model." + k].tobytes(), k
    assert any(gpt.arrays["model." + k].tobytes() != ac.arrays["model." + k].tobytes() for k in model.policy_parameters())
    assert all(np.isfinite(v).all() for part in vq.values() for v in part.values())


@pytest.mark.parametrize("stage", ["train-vqvae", "train-gpt", "finetune-ac"])
def test_resume_matches_uninterrupted_run(run, tmp_path, stage):
    root, common = run
    corpus = str(root / "corpus")
    work = tmp_path / "ckpt"
    shutil.copytree(root / "ckpt", work)
    stop = "1" if stage == "finetune-ac" else "3"
    target = {"train-vqvae": ["vqvae_upper.ckpt", "vqvae_lower.ckpt"], "train-gpt": ["gpt.ckpt"],
              "finetune-ac": ["actor_critic.ckpt"]}[stage]  # fmt: skip
    for name in target:
        (work / name).unlink()
    assert main([stage, *common, "--corpus", corpus, "--ckpt-dir", str(work), "--stop-after", stop]) == 0
    assert main([stage, *common, "--corpus", corpus, "--ckpt-dir", str(work), "--resume"]) == 0
    for name in target:
        assert file_bytes(work / name) == file_bytes(root / "ckpt" / name), name


def test_rerun_reproduces_checkpoints(run, tmp_path):
    root, common = run
    corpus = str(root / "corpus")
    for stage in ("train-vqvae", "train-gpt", "finetune-ac"):
        assert main([stage, *common, "--corpus", corpus, "--ckpt-dir", str(tmp_path)]) == 0
    for f in sorted((root / "ckpt").iterdir()):
        assert file_bytes(f) == file_bytes(tmp_path / f.name), f.name


# ---------------------------------------------------------------------------
# generate / evaluate / inspect / export
# ---------------------------------------------------------------------------


def test_generate_is_reproducible(run, tmp_path):
    root, _ = run
    music = str(root / "corpus" / "seq0000.mfeat")
    args = ["generate", "--ckpt-dir", str(root / "ckpt"), "--music", music, "--length", "6", "--seed", "5"]
    assert main([*args, "--out", str(tmp_path / "a.motn")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.motn")]) == 0
    assert file_bytes(tmp_path / "a.motn") == file_bytes(tmp_path / "b.motn")
    assert read_motion(tmp_path / "a.motn").frames.shape == (48, 24, 3)
    trace = json.loads((tmp_path / "a.codes.json").read_text())
    assert len(trace["upper"]) == 6 and all(0 <= c < 8 for c in trace["upper"] + trace["lower"])
    assert (tmp_path / "a.beats.json").is_file()
    assert main([*args, "--length", "9", "--out", str(tmp_path / "c.motn")]) == 2
    assert main([*args[:-2], "--start", "1", "2", "--policy", "pretrained", "--out", str(tmp_path / "d.motn")]) == 0
    assert json.loads((tmp_path / "d.codes.json").read_text())["start"] == [1, 2]


def test_evaluate_reference_against_itself(run, tmp_path):
    root, common = run
    ref = tmp_path / "ref"
    ref.mkdir()
    for f in (root / "corpus").glob("*.motn"):
        shutil.copy(f, ref / f.name)
    out = tmp_path / "report.json"
    assert main(["evaluate", *common, "--generated", str(ref), "--reference", str(ref), "--out", str(out),
                 "--csv", str(tmp_path / "r.csv")]) == 0  # fmt: skip
    report = json.loads(out.read_text())
    assert report["fid_k"] < 1e-4 and report["fid_g"] < 1e-4
    assert report["config_hash"]
    first = out.read_bytes()
    assert main(["evaluate", *common, "--generated", str(ref), "--reference", str(ref), "--out", str(out)]) == 0
    assert out.read_bytes() == first
    assert main(["evaluate", "--generated", str(tmp_path / "nope"), "--reference", str(ref)]) == 3


def test_evaluate_generated_dances_with_beats(run, tmp_path):
    root, common = run
    gen = tmp_path / "gen"
    gen.mkdir()
    for i in range(2):
        music = str(root / "corpus" / f"seq000{i}.mfeat")
        assert main(["generate", "--ckpt-dir", str(root / "ckpt"), "--music", music, "--length", "8",
                     "--seed", str(i), "--out", str(gen / f"g{i}.motn")]) == 0  # fmt: skip
    out = tmp_path / "rep.json"
    assert main(["evaluate", *common, "--generated", str(gen), "--reference", str(root / "corpus"), "--out", str(out)]) == 0
    assert 0.0 <= json.loads(out.read_text())["bas"] <= 1.0


def test_inspect_codebook(run, tmp_path):
    root, _ = run
    path = root / "ckpt" / "vqvae_lower.ckpt"
    assert main(["inspect-codebook", "--checkpoint", str(path), "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("code*.motn"))) == 8
    rows = (tmp_path / "codebook.csv").read_text().splitlines()
    assert rows[0] == "code,usage,interior_displacement" and len(rows) == 9
    assert all(r.split(",")[2] for r in rows[1:])
    assert main(["inspect-codebook", "--checkpoint", str(path), "--code", "8", "--out", str(tmp_path / "x")]) == 2


def test_two_code_sequence_matches_single_code_decodes(run):
    root, _ = run
    model, _, _ = pl.load_vq_model(root / "ckpt" / "vqvae_upper.ckpt")
    k, margin = 16, model.boundary_frames()
    a, b = pl.single_code_motion(model, 2, k), pl.single_code_motion(model, 5, k)
    with no_grad():
        both = model.decode_pose(model.embed_codes(np.array([[2] * k + [5] * k]))).data[0].reshape(2 * k * 8, -1, 3)
    inner = slice(margin, k * 8 - margin)
    assert np.abs(both[inner] - a[inner]).max() < 1e-3
    tail = slice(k * 8 + margin, 2 * k * 8 - margin)
    assert np.abs(both[tail] - b[margin : k * 8 - margin]).max() < 1e-3


def test_export_anim_roundtrip(run, tmp_path):
    root, _ = run
    motion_path = root / "corpus" / "seq0001.motn"
    out = tmp_path / "anim.csv"
    assert main(["export-anim", str(motion_path), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "frame,joint,x,y,z" and len(lines) - 1 == 64 * 24
    rows = [[float(x) for x in line.split(",")] for line in lines[1:]]
    original = read_motion(motion_path)
    np.testing.assert_array_equal(pl.import_rows(rows).frames, original.frames)
    assert main(["export-anim", str(motion_path), "--format", "json", "--out", str(tmp_path / "a.json")]) == 0
    data = json.loads((tmp_path / "a.json").read_text())
    assert data["columns"] == ["frame", "joint", "x", "y", "z"] and len(data["rows"]) == 64 * 24
    (tmp_path / "bad.motn").write_bytes(b"MOTN")
    assert main(["export-anim", str(tmp_path / "bad.motn")]) == 3
