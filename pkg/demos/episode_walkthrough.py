"""One 1-shot episode through an untrained dual-domain model, map by map.

Run: python demos/episode_walkthrough.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import fake_generated  # noqa: E402  stand-in RGB/lightness variants

from irfuse.dataset import load_dataset, make_folds, make_view, read_split, sample_episode, split_variants
from irfuse.fss import FSSModel, ModelConfig, parameter_overhead
from irfuse.synthetic import write_synthetic_dataset
from irfuse.train import collate_train, episode_losses

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
root = write_synthetic_dataset(out / "synthetic", n=48, seed=0)
samples, names = load_dataset(root, "synthetic")
print("classes:", names)

folds = make_folds(names[1:], 4)
for f in folds:
    print(f"fold {f.fold_id}: novel {sorted(f.test_classes)}")

train = split_variants(fake_generated(samples), read_split(root, "train"))
view = make_view(train, "method3", names)
ep = sample_episode(view, folds[0], 1, "meta_train", [0, 1], with_aux=True)
print(f"episode target: {names[ep.target_class]}; support {ep.support_ids}, query {ep.query_id}, "
      f"aux query {ep.aux_query_id}")

torch.manual_seed(0)
model = FSSModel(ModelConfig("method3", n_base=3)).eval()  # batch-norm needs eval mode for one episode
batch = collate_train([ep])
out_maps = model(batch)
for name in ("meta_ir", "base_ir", "adj_ir", "meta_rgb", "base_rgb", "final"):
    t = getattr(out_maps, name)
    print(f"{name:9s} {tuple(t.shape)}  range [{t.min():+.3f}, {t.max():+.3f}]")

losses = episode_losses(model, batch, "method3")
print("losses:", {k: round(v.item(), 4) for k, v in losses.items()})

pred = out_maps.final.argmax(1)[0].numpy()
print(f"foreground fraction predicted {pred.mean():.3f}, labelled {np.mean(ep.query_mask):.3f}")

baseline = FSSModel(ModelConfig("baseline", n_base=3))
print("dual-domain overhead:", parameter_overhead(model, baseline))
