"""Stage-3 recalibration probe: stronger joint stage on cached stages 1-2."""

import dataclasses
import sys
import time

import numpy as np
import torch

torch.set_num_threads(1)

sys.path.insert(0, "/root/pkg/src")

from erasekit.config import small_config
from erasekit.scenegen import build_unpaired_corpus
from erasekit.evaluation import (build_eval_cases, ensure_segmentor, evaluate,
                                 make_student_eraser, train_seed_pipeline)
from erasekit.training import LossLog, StageThreeFlags, train_stage3

T0 = time.perf_counter()


def say(msg):
    print(f"[{time.perf_counter() - T0:7.0f}s] {msg}", flush=True)


def main():
    variant = sys.argv[1] if len(sys.argv) > 1 else "A"
    cfg = small_config()
    seg, _ = ensure_segmentor(cfg, "/root/pkg/.acceptance_cache", say)
    cases = build_eval_cases(cfg.scene, cfg.eval.eval_scenes,
                             cfg.data.dilate_px, 0)
    models, d1, _ = train_seed_pipeline(cfg, 0, "/root/pkg/.acceptance_cache",
                                        seg, say)
    d2 = build_unpaired_corpus(cfg.scene, 0, cfg.data.d2_train,
                               cfg.data.dilate_px)

    overrides = {
        "A": dict(iterations=2000, learning_rate=1.5e-4, d2_steps=2),
        "B": dict(iterations=3000, learning_rate=2e-4, d2_steps=3,
                  prob_threshold=0.1),
        "C": dict(iterations=2000, learning_rate=1.5e-4, d2_steps=2,
                  prob_threshold=0.05, ios_threshold=0.5),
    }[variant]
    stage3 = dataclasses.replace(cfg.stage3, **overrides)
    say(f"variant {variant}: {overrides}")

    out_dir = f"/root/pkg/.calib/recal_{variant}"
    res = train_stage3(models, d1, d2, stage3, 0, weights=cfg.weights,
                       flags=StageThreeFlags(), out_dir=out_dir)
    say(f"stage 3 trained ({res.elapsed:.0f}s)")

    recs = LossLog.read(f"{out_dir}/stage3_loss.log")
    d2r = [r for r in recs if r["dataset"] == "d2"]
    k = 6
    n = len(d2r) // k
    trend = [round(float(np.mean([r["sundries"] for r in d2r[i*n:(i+1)*n]])), 2)
             for i in range(k)]
    say(f"d2 sundries trend: {trend}")

    models.student.eval()
    for ns in (1, 2):
        eraser = make_student_eraser(models.student, ns,
                                     cfg.eval.mid_timestep, cfg.eval.composite)
        rep = evaluate(eraser, cases, seg, cfg.eval.ios_threshold,
                       cfg.eval.prob_threshold)
        say(f"variant {variant} steps={ns}: MSN={rep.msn:.4f} "
            f"MARS={rep.mars:.4f}")


if __name__ == "__main__":
    main()
