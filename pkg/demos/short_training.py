"""Train a small fused model for a few hundred iterations and inspect it."""
import sys
import tempfile
from pathlib import Path

from mfuser.backbones import forward_with_adapters
from mfuser.config import ExperimentConfig
from mfuser.data import SOURCE, generate_dataset
from mfuser.pca import pca_visualize
from mfuser.tensor import no_grad
from mfuser.train import census_lines, evaluate, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = ExperimentConfig(iters=iters, warmup=max(1, iters // 10), eval_every=max(1, iters // 4))
out = Path(tempfile.mkdtemp(prefix="mfuser_demo_"))
res = train(cfg, out, log=print)
model = res.model

for line in census_lines(model):
    print(line)
print("frozen encoders unchanged:", res.hash_before == res.hash_after)
for domain, score in evaluate(model).items():
    print(f"{domain:12s} mIoU {score:.3f}")

# PCA colour map of the final adapted VFM tokens for one source image
images = generate_dataset(SOURCE, 1, cfg.eval_seed, size=cfg.image_size)[0].images
with no_grad():
    feats = forward_with_adapters(images, model.backbones.vfm, model.backbones.vlm, model.adapters, cfg.stride)
pca_visualize(feats.vfm, out / "pca_vfm.ppm")
print("outputs in", out)
