"""Seed-0 probe of the full small_config ablation into the acceptance cache."""

import sys
import time

import torch

torch.set_num_threads(1)

from erasekit.config import small_config
from erasekit.evaluation import render_table, run_ablation

seeds = tuple(int(s) for s in sys.argv[1].split(",")) if len(sys.argv) > 1 else (0,)
began = time.perf_counter()


def progress(msg):
    print(f"[{time.perf_counter() - began:7.0f}s] {msg}", flush=True)


result = run_ablation(small_config(), seeds=seeds,
                      out_dir="/root/pkg/.acceptance_cache",
                      progress=progress)
print(render_table(result))
