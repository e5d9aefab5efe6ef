"""Quick pilot: train a small config briefly and probe mini-CAS.

Scratch tool for sizing the desk-scale experiment; not part of the package.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from ldlab.config import AppConfig, DataConfig, ScheduleConfig
from ldlab.data import Sample, ShapesDataset, generate_scene
from ldlab.engine import SamplingEngine
from ldlab.metrics import ClassifierConfig, mini_cas
from ldlab.rng import derive_seed
from ldlab.training import TrainConfig, train
from ldlab.unet import DenoiserConfig, LayoutUNet

p = argparse.ArgumentParser()
p.add_argument("--steps", type=int, default=1200)
p.add_argument("--scenes", type=int, default=512)
p.add_argument("--eval-scenes", type=int, default=24)
p.add_argument("--batch", type=int, default=8)
p.add_argument("--lr", type=float, default=2e-4)
p.add_argument("--hidden", type=int, default=32)
p.add_argument("--rb", type=int, default=1)
p.add_argument("--fusion", default="16,8")
p.add_argument("--placement", default="both")
p.add_argument("--scale", type=float, default=1.0)
p.add_argument("--out", default="/tmp/pilot")
p.add_argument("--resume", default=None)
args = p.parse_args()

out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

model_cfg = DenoiserConfig(
    hidden_channels=args.hidden,
    res_blocks_per_stage=args.rb,
    fusion_resolutions=tuple(int(r) for r in args.fusion.split(",")),
    fusion_placement=args.placement,
)
schedule = ScheduleConfig(timesteps=50, beta_start=2e-3, beta_end=0.4).build()
print("alpha_bar_T =", schedule.alpha_bar[-1])
data_cfg = DataConfig(num_scenes=args.scenes)
spec = data_cfg.scene_spec(model_cfg.num_categories)
dataset = ShapesDataset(spec, args.scenes, base_seed=0)

model = LayoutUNet(model_cfg)
print("params:", model.parameter_count())
tc = TrainConfig(
    iterations=args.steps,
    batch_size=args.batch,
    learning_rate=args.lr,
    ema_rate=0.999,
    uncond_prob=0.2,
    seed=0,
    checkpoint_every=100000,
    log_every=50,
)
t0 = time.time()
ckpt = train(model, dataset, schedule, tc, out, resume_from=args.resume, log_print=True)
print(f"trained {args.steps} steps in {time.time()-t0:.0f}s -> {ckpt}")

engine = SamplingEngine.from_path(ckpt)
real = [generate_scene(spec, derive_seed("held-out", "pilot", i)) for i in range(args.eval_scenes)]
gen = []
t0 = time.time()
for i, scene in enumerate(real):
    imgs, _ = engine.sample(scene.layout, args.scale, None, 1, derive_seed(7, "pilot-eval", i))
    gen.append(Sample(image=imgs[0].pixels.astype(np.float32) / 127.5 - 1.0, layout=scene.layout, seed=0))
print(f"sampled {len(real)} scenes in {time.time()-t0:.0f}s")

from PIL import Image
strip = np.concatenate([((g.image + 1) * 127.5).astype(np.uint8) for g in gen[:8]], axis=1)
realstrip = np.concatenate([((r.image + 1) * 127.5).astype(np.uint8) for r in real[:8]], axis=1)
Image.fromarray(np.concatenate([realstrip, strip], axis=0)).save(out / "pilot_compare.png")

report = mini_cas(gen, real, ClassifierConfig(min_per_class=3, seed=0))
print(json.dumps(report, indent=2))
(out / "pilot_report.json").write_text(json.dumps(report, indent=2))
