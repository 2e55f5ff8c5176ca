"""Timing probe: measure it/s for stages 1-3 at small_config scale."""

import time

import torch

torch.set_num_threads(1)

import dataclasses

from erasekit.config import small_config
from erasekit.diffusion import NoiseSchedule
from erasekit.scenegen import build_paired_corpus, build_unpaired_corpus
from erasekit.segmentor import EntitySegmenter
from erasekit.training import (ErasureModels, build_denoiser, train_stage1,
                               train_stage2, train_stage3)

cfg = small_config()
print("scene size", cfg.scene.size, "base_width", cfg.model.base_width)

t0 = time.perf_counter()
d1 = build_paired_corpus(cfg.scene, 0, 200, cfg.data.mask_min_area,
                         cfg.data.mask_max_area, cfg.data.max_entity_overlap)
d2 = build_unpaired_corpus(cfg.scene, 0, 100, cfg.data.dilate_px)
print(f"corpora: {time.perf_counter() - t0:.1f}s for 300 samples")

schedule = NoiseSchedule(cfg.schedule.steps, cfg.schedule.beta_start,
                         cfg.schedule.beta_end)
teacher = build_denoiser(schedule, "eps", 0, cfg.model.base_width,
                         cfg.model.time_dim)

n1 = 30
c1 = dataclasses.replace(cfg.stage1, iterations=n1)
t0 = time.perf_counter()
train_stage1(teacher, d1, [], c1, seed=0)
dt = time.perf_counter() - t0
print(f"stage1: {n1 / dt:.2f} it/s -> {cfg.stage1.iterations / (n1 / dt) / 60:.1f} min at {cfg.stage1.iterations} iters")

models = ErasureModels(schedule, teacher,
                       segmentor=EntitySegmenter(cfg.segmentor))
models.ensure_distillation_models(0)

n2 = 10
c2 = dataclasses.replace(cfg.stage2, iterations=n2)
t0 = time.perf_counter()
train_stage2(models, d1, c2, seed=0, weights=cfg.weights)
dt = time.perf_counter() - t0
print(f"stage2: {n2 / dt:.2f} it/s -> {cfg.stage2.iterations / (n2 / dt) / 60:.1f} min at {cfg.stage2.iterations} iters")

n3 = 10
c3 = dataclasses.replace(cfg.stage3, iterations=n3)
t0 = time.perf_counter()
train_stage3(models, d1, d2, c3, seed=0, weights=cfg.weights)
dt = time.perf_counter() - t0
print(f"stage3: {n3 / dt:.2f} it/s -> {cfg.stage3.iterations / (n3 / dt) / 60:.1f} min at {cfg.stage3.iterations} iters")
