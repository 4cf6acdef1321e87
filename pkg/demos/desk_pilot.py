"""
Title: Three-stage training on a synthetic desk dataset
Description: Generate paired images, train all three stages, and sweep the fusion strength.
"""

"""
## Setup

Pass a scale as the first argument to train longer. `1` reproduces the pilot
used by the acceptance suite (about 8 minutes on one core). The default `0.1`
finishes in about a minute and only shows the trends.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from glare import config
from glare.data import gen_dataset
from glare.train import enhance_full, enhance_stage2, mean_psnr, train_stage1, train_stage2, train_stage3

scale = float(sys.argv[1]) if len(sys.argv) > 1 else 0.1
work = Path(tempfile.mkdtemp(prefix="glare_pilot_"))

cfg = config.TrainConfig()
cfg.stage1.lr = 1e-3
cfg.stage1.iterations = int(1500 * scale)
cfg.stage2.iterations = int(1000 * scale)
cfg.stage3.iterations = int(1000 * scale)
cfg.train.val_every = 0
cfg.train.out_dir = str(work / "runs")

"""
## Data

Normal-light images are procedural textures. Their low-light partners come from
a gamma curve, a gain below one, and Gaussian noise, then 8-bit quantization.
"""

manifest = gen_dataset(work / "data", count=128, size=32, seed=cfg.train.seed)
ll, nl = manifest.arrays("val")
print(f"{len(manifest.split('train'))} train / {len(ll)} val pairs in {work}")
print(f"PSNR of the raw low-light input: {mean_psnr(ll, nl):.2f} dB")

"""
## Stage I: a codebook for normal light

The VQ autoencoder learns to reconstruct normal-light images from a small
codebook.
"""

r1 = train_stage1(cfg, manifest)
print(f"stage I reconstruction: {r1.summary['val_psnr_init']:.2f} -> {r1.summary['val_psnr_final']:.2f} dB")

"""
## Stage II: mapping low light into the codebook's latent space

The conditional flow learns where normal-light latents sit relative to the
low-light encoding. Decoding the generated latent already beats the input.
"""

r2 = train_stage2(cfg, r1.checkpoint, manifest)
s2 = r2.summary
print(f"stage II NLL: {s2['val_nll_init']:.3f} -> {s2['val_nll_final']:.3f} nats/dim")
print(f"stage II only: {s2['val_psnr_stage2']:.2f} dB")

"""
## Stage III: fusing low-light features back in

The fusion decoder mixes features of the low-light image into the decoder.
`beta` scales that blend. `beta=0` ignores the low-light features, and larger
values lean on them more.
"""

r3 = train_stage3(cfg, r2.checkpoint, manifest)
print(f"stage III: {r3.summary['val_psnr_final']:.2f} dB, learned mix weights {np.round(r3.summary['mix_weights'], 3)}")

pipe = r3.pipeline
print(f"  stage II decoder path: {mean_psnr(enhance_stage2(pipe, ll), nl):.2f} dB")
for beta in (0.0, 0.25, 0.5, 1.0):
    print(f"  beta={beta:<4}: {mean_psnr(enhance_full(pipe, ll, beta=beta), nl):.2f} dB")
