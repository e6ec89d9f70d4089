# Training a small model and enhancing a volume
#
# The desk preset trains in a few minutes on a laptop CPU. We cap the run at
# 200 steps, then compare the network with plain trilinear upsampling on a
# phantom it never saw.

import numpy as np

from pfnl3d.model import enhance, zero_params
from pfnl3d.metrics import psnr, ssim3d
from pfnl3d.train import TrainConfig, baseline_upsample, load_cases, make_phantom_case, train

cfg = TrainConfig(max_steps=200, epochs=7, seed=0)
train_cases, val_cases = load_cases(cfg)
print("model:", cfg.model)

# %% Train

result = train(cfg, train_cases, val_cases)
losses = np.array([row[2] for row in result.loss_log])
print("loss, first 10 steps:", losses[:10].mean().round(4), " last 10:", losses[-10:].mean().round(4))
for epoch, mean_loss, vp, vs in result.epoch_log:
    print(f"epoch {epoch}: mean loss {mean_loss:.4f}, held-out PSNR {vp:.2f} dB, SSIM {vs:.3f}")

# %% A zero model is exactly the trilinear skip path

case = make_phantom_case(20_000, cfg.phantom_dims, cfg.scale)
skip = enhance(zero_params(cfg.model), cfg.model, *case.phases)
print("zero model equals baseline:", np.array_equal(skip, baseline_upsample(case, cfg.scale)))

# %% Trained model against the baseline

out = enhance(result.checkpoint.params, cfg.model, *case.phases)
for name, vol in (("trilinear", skip), ("network", out)):
    print(f"{name:10s} PSNR {psnr(case.reference, vol):.2f} dB  SSIM {ssim3d(case.reference, vol):.3f}")
