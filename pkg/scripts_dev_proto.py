"""Dev-only prototype: build the default dataset, train briefly, evaluate."""
import os
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from floodsr.data import build_dataset, PatchSet
from floodsr.diffusion import SamplerConfig
from floodsr.training import train, load_models, evaluate_models

root = "/tmp/proto"
ds = os.path.join(root, "ds")
t0 = time.time()
if not os.path.exists(os.path.join(ds, "manifest.json")):
    m = build_dataset(seed=11, n_events=5, patch=64, upscale=4, out_dir=ds,
                      domain=256, steps_per_event=20, relax_iters=30)
    print(f"dataset built in {time.time()-t0:.0f}s: cg_fg_mse={m.cg_fg_mse:.2f} "
          f"max_depth={m.max_depth:.1f} samples={len(m.samples)}", flush=True)
else:
    from floodsr.data import DatasetManifest
    m = DatasetManifest.load(ds)
    print("dataset exists:", m.cg_fg_mse, m.max_depth, flush=True)

ps = PatchSet(ds, "train")
print("fine depth stats: mean={:.1f} max={:.1f} | frac wet(>30cm)={:.3f}".format(
    ps.fine_cm.mean(), ps.fine_cm.max(), (ps.fine_cm > 30).mean()), flush=True)

cfg = {
    "mode": "pixel", "dataset": ds, "seed": 3,
    "unet": {"base_width": 8, "depth": 3, "attn_levels": [2], "time_embed_dim": 64},
    "train": {"steps": 4000, "batch_size": 4, "lr": 2e-4, "log_every": 200,
              "checkpoint_every": 2000},
}
out = os.path.join(root, "run_a")
t0 = time.time()
p = train(cfg, out, log_fn=lambda s: print(s, flush=True))
print(f"trained in {(time.time()-t0)/60:.1f} min", flush=True)

models = load_models(p)
for scfg, label in [
    (SamplerConfig("random_noise", infer_steps=200, seed=0), "full-200"),
    (SamplerConfig("truncated", m=50, infer_steps=50, seed=0), "trunc-50"),
    (SamplerConfig("truncated", m=20, infer_steps=20, seed=0), "trunc-20"),
]:
    t0 = time.time()
    rep, sr, idx = evaluate_models(models, ds, sampler_cfg=scfg, threshold_cm=30.0,
                                   sample_n=64, seed=9)
    print(f"{label}: cg={rep.cg_fg_mse:.2f} sr={rep.sr_fg_mse:.2f} "
          f"change={rep.mse_pct_change:.1f}% csi {rep.cg_csi} -> {rep.sr_csi} "
          f"({time.time()-t0:.0f}s)", flush=True)
