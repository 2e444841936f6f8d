"""A short training run end to end: train, pick a scale, evaluate, warp.

This uses a narrowed encoder and a few dozen iterations so it finishes in a
couple of minutes; the numbers show the plumbing rather than a converged
model. Run with ``python3 demos/03_train_and_warp.py [out_dir]``.
"""

# %%
import sys
from pathlib import Path

import numpy as np

from mmnet import MMNet, TrainConfig
from mmnet.config import EncoderConfig, ModelConfig, SEMConfig
from mmnet.data import SyntheticSpec, generate_synthetic, save_image
from mmnet.evaluation import predict_all, select_scale
from mmnet.supervision import train
from mmnet.tps import warp_image

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("train_demo")
out.mkdir(parents=True, exist_ok=True)

train_set = generate_synthetic(SyntheticSpec(seed=0, pairs=20))
test_set = generate_synthetic(SyntheticSpec(seed=1, pairs=5))

cfg = ModelConfig(encoder=EncoderConfig.uniform((8, 16, 16, 24, 24), blocks=1), sem=SEMConfig(branch_channels=8))
model = MMNet(cfg, seed=0)
print(f"{model.num_parameters()} parameters")

# %%
before = {s: m.pck(0.1).value for s, m in predict_all(model, test_set).items()}
history = train(model, train_set, TrainConfig(max_iters=40, batch_size=4), out,
                callback=lambda r: print(f"iter {r.iteration:3d}  loss {r.loss:8.3f}") if r.iteration % 10 == 0 else None)

# %%
matches = predict_all(model, test_set)
scale = select_scale(matches)
for s in sorted(matches):
    print(f"scale {s}: PCK@0.1 {before[s]:.2f} -> {matches[s].pck(0.1).value:.2f}")
print("selected scale", scale)

# %%
# warp each source image so its keypoints land on the predicted target locations
m = matches[scale]
for smp, pred in zip(test_set, m.pred):
    warped = warp_image(smp.source.astype(np.float64), smp.src_kps, pred)
    save_image(out / f"{smp.pair_id}_warped.ppm", np.clip(warped, 0, 1))
    save_image(out / f"{smp.pair_id}_target.ppm", smp.target)
print(f"warped images in {out}/")
