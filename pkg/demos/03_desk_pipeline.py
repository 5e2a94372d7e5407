"""
The whole pipeline from the command line
========================================

Synthetic corpus -> VQ-VAEs -> GPT -> actor-critic finetuning -> generation
-> evaluation, at a size that runs in a few minutes on one core.
"""

import json
import tempfile
from pathlib import Path

from choreo.cli import main

work = Path(tempfile.mkdtemp(prefix="choreo-demo-"))
config = {
    "corpus": {"num_sequences": 8, "frames": 128, "feature_dim": 32},
    "vqvae": {"num_codes": 16, "code_dim": 16, "width": 16, "steps": 200, "batch_size": 8, "crop": 64,
              "velocity_steps": 50, "lr": 1e-3},
    "gpt": {"layers": 2, "heads": 2, "channels": 32, "block_size": 8, "steps": 200, "batch_size": 16},
    "actor_critic": {"epochs": 3, "batch_size": 8, "stride": 4, "lr": 2e-4, "lr_decay": "linear"},
}
(work / "config.json").write_text(json.dumps(config))
common = ["--config", str(work / "config.json")]

main(["gen-synth", *common, "--out", str(work / "corpus")])
main(["gen-synth", *common, "--out", str(work / "held"), "--num", "4", "--corpus-seed", "100"])
for stage in ("train-vqvae", "train-gpt", "finetune-ac"):
    main([stage, *common, "--corpus", str(work / "corpus"), "--ckpt-dir", str(work / "ckpt")])

print((work / "ckpt" / "ac_rewards.csv").read_text())

# dance to the held-out music with both policies; at this size and with only
# 3 epochs the BAS difference is noise, the controlled comparison (a GPT
# pretrained on misaligned music, 5 seeds) is acceptance criterion 7
for policy in ("pretrained", "finetuned"):
    out = work / policy
    out.mkdir()
    for music in sorted((work / "held").glob("*.mfeat")):
        main(["generate", "--ckpt-dir", str(work / "ckpt"), "--music", str(music), "--length", "16",
              "--seed", "0", "--policy", policy, "--out", str(out / music.with_suffix(".motn").name)])
    main(["evaluate", *common, "--generated", str(out), "--reference", str(work / "held"),
          "--out", str(work / f"{policy}.json")])
    report = json.loads((work / f"{policy}.json").read_text())
    print(policy, {k: round(v, 4) for k, v in report.items() if isinstance(v, float)})

# one generated dance as CSV rows of frame, joint, x, y, z
main(["export-anim", str(work / "finetuned" / "seq0000.motn"), "--out", str(work / "seq0000.csv")])
print((work / "seq0000.csv").read_text().splitlines()[:3])
print("outputs in", work)
