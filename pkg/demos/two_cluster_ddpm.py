"""Train the desk denoiser on a two-mode toy set and check that sampling finds both modes.

    python3 demos/two_cluster_ddpm.py [steps]

About four minutes per 2,000 steps on one CPU core.
"""

import sys

import torch

from garmentdiff import Denoiser, TextureSet, TrainConfig, make_schedule, train
from garmentdiff.diffusion import sample_normalized

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
sched = make_schedule()
cfg = TrainConfig(steps=steps, log_every=250)
torch.manual_seed(0)

targets = torch.cat([torch.full((8, 3, 32, 32), -0.5), torch.full((8, 3, 32, 32), 0.5)])
model = Denoiser.from_config(cfg, cond_dim=1, sched=sched)
print(f"denoiser with {model.parameter_count():,} parameters")
trained = train(model, TextureSet(targets, torch.zeros(16, 1)), sched, cfg,
                on_step=lambda k, loss: k % 250 == 0 and print(f"step {k:5d}  loss {loss:.4f}"))

y = sample_normalized(model, torch.zeros(100, 1), (100, 3, 32, 32), sched, torch.Generator().manual_seed(1))
level = y.mean((1, 2, 3))
near = lambda c: int(((y - c).abs().mean((1, 2, 3)) < 0.1).sum())
print(f"samples near -0.5: {near(-0.5)}, near +0.5: {near(0.5)}, elsewhere: {100 - near(-0.5) - near(0.5)}")
print("first sample levels:", [round(float(v), 3) for v in level[:10]])
