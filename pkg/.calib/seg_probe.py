"""Segmentor convergence probe: train with periodic validation snapshots."""
import math
import sys
import time
from dataclasses import replace

import numpy as np
import torch

sys.path.insert(0, "/root/pkg/src")
torch.set_num_threads(1)

from erasekit.config import small_config
from erasekit.segmentor import (EntitySegmenter, SegTrainConfig, _batch_loss,
                                _scene_batch, build_training_scenes,
                                validate_segmentor)

cfg = small_config()
scene = cfg.scene
tc = SegTrainConfig(iterations=8000, num_scenes=5000, val_scenes=200)
seed = 0

torch.manual_seed(seed)
model = EntitySegmenter(cfg.segmentor)
opt = torch.optim.AdamW(model.parameters(), lr=tc.learning_rate,
                        weight_decay=tc.weight_decay)
t0 = time.time()
scenes = build_training_scenes(scene, seed, tc.num_scenes, tc.blank_fraction)
print(f"scenes built in {time.time()-t0:.1f}s", flush=True)

val = build_training_scenes(scene, seed + 101, tc.val_scenes)
blanks = build_training_scenes(replace(scene, min_entities=0, max_entities=0),
                               seed + 102, 30)

t0 = time.time()
for step in range(tc.iterations):
    frac = step / max(1, tc.iterations)
    scale = (tc.final_lr_scale + (1 - tc.final_lr_scale)
             * 0.5 * (1 + math.cos(math.pi * frac)))
    for group in opt.param_groups:
        group["lr"] = tc.learning_rate * scale
    rng = np.random.default_rng(np.random.SeedSequence([0x5E6E, seed, step]))
    idx = rng.integers(0, len(scenes), size=tc.batch_size)
    batch = [scenes[int(i)] for i in idx]
    pred = model(_scene_batch(batch))
    gt = [torch.from_numpy(s.entity_masks.astype(np.float32)) for s in batch]
    loss = _batch_loss(pred, gt, tc.noobj_weight)
    opt.zero_grad()
    loss.backward()
    opt.step()
    if (step + 1) % 500 == 0:
        model.eval()
        rep = validate_segmentor(model, val + blanks, tc.iou_threshold,
                                 tc.prob_threshold)
        model.train()
        rate = (step + 1) / (time.time() - t0)
        print(f"step {step+1:5d} loss {float(loss.detach()):.4f} "
              f"recall {rep.recall:.3f} iou {rep.mean_iou:.3f} "
              f"fp/img {rep.false_positives_per_image:.3f} "
              f"blankmax {rep.max_blank_entity_prob:.3f} "
              f"({rate:.1f} it/s)", flush=True)
