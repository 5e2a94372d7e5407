"""
A pose VQ-VAE on the synthetic corpus
=====================================

Train the two half-body codebooks on a few short synthetic dances, then look
at what the codes mean: reconstruction error, codebook usage, and the fact
that a repeated code decodes to a still pose.
"""

import numpy as np

from choreo.motion import SyntheticCorpusSpec, generate_synthetic, toy_split
from choreo.numerics import no_grad
from choreo.pipeline import interior_displacement
from choreo.vqvae import VqLossWeights, VqTrainer, VqTrainSchedule, VqVaeConfig, VqVaeModel, half_body_data

# 16 dances of 64 frames on an 8-joint skeleton; beats are the speed minima
corpus = generate_synthetic(SyntheticCorpusSpec(num_sequences=16, T=64, J=8, seed=0))
motions = [s.motion for s in corpus]
split = toy_split(8)
print("beats of the first dance (frames):", corpus[0].beats)

config = VqVaeConfig(num_codes=32, code_dim=32, downsample=8, width=32)
schedule = VqTrainSchedule(steps=600, batch_size=16, crop=64, lr=1e-3, velocity_steps=0, dead_code_interval=50,
                           log_every=0)

models = {}
for half in ("upper", "lower"):
    poses, vels = half_body_data(motions, split, half)
    model = VqVaeModel(half, len(getattr(split, half)), config, seed=0)
    result = VqTrainer(model, poses, vels, VqLossWeights(), schedule).run()
    with no_grad():
        q = model.quantize(model.encode(poses))
        recon = model.decode_pose(q.e_q).data
    print(f"{half}: loss {result.loss[0]:.3f} -> {result.loss[-1]:.3f}, "
          f"L1 {np.abs(recon - poses).mean():.4f}, codes used {len(np.unique(q.indices))}/32")
    models[half] = model

# every code step covers d=8 frames, so a 64-frame dance is 8 codes per half
lower = models["lower"]
poses, _ = half_body_data(motions[:1], split, "lower")
print("lower codes of dance 0:", lower.codes(poses)[0])

# a code repeated 16 times decodes to a constant pose once we are far enough
# from the sequence ends for zero padding not to matter
with no_grad():
    still = lower.decode_pose(lower.embed_codes(np.full((1, 16), 3))).data[0]
margin = lower.boundary_frames()
print(f"margin {margin} frames, interior displacement {interior_displacement(still, margin):.2e}")
print(f"displacement including the ends {np.abs(np.diff(still, axis=0)).max():.2e}")
