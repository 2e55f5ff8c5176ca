"""Teacher-quality + suppression-hysteresis recalibration, staged and cached."""

import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)
sys.path.insert(0, "/root/pkg/src")

from erasekit.config import small_config
from erasekit.diffusion import Condition, NoiseSchedule, ode_sample
from erasekit.evaluation import (build_eval_cases, ensure_segmentor, evaluate,
                                 make_student_eraser)
from erasekit.scenegen import build_paired_corpus, build_unpaired_corpus
from erasekit.training import (ErasureModels, LossLog, StageThreeFlags,
                               build_denoiser, composite, train_stage1,
                               train_stage2, train_stage3)

T0 = time.perf_counter()
OUT = Path("/root/pkg/.calib/recal_full")
OUT.mkdir(exist_ok=True)


def say(msg):
    print(f"[{time.perf_counter() - T0:7.0f}s] {msg}", flush=True)


def teacher_eraser(teacher):
    def eraser(case, seed):
        x = torch.from_numpy(case.x).float().permute(2, 0, 1)[None]
        m = torch.from_numpy(case.mask.astype(np.float32))[None, None]
        cond = Condition(x_m=x, m_in=m)
        gen = torch.Generator().manual_seed(seed)
        x_t = torch.randn(x.shape, generator=gen)
        out = ode_sample(teacher, x_t, 999, cond, steps=20).clamp(0, 1)
        return composite(out, cond)[0].permute(1, 2, 0).numpy()
    return eraser


def main():
    stage1_iters = int(sys.argv[1]) if len(sys.argv) > 1 else 2400
    s3_label = sys.argv[2] if len(sys.argv) > 2 else "hyst"
    variants = {
        "hyst": (dict(iterations=1600, d2_steps=2, prob_threshold=0.1), 400),
        "hyst-long": (dict(iterations=2400, d2_steps=2,
                           prob_threshold=0.1), 400),
        "hyst2": (dict(iterations=2800, d2_steps=3, prob_threshold=0.05), 400),
        "hyst3": (dict(iterations=2800, d2_steps=3, prob_threshold=0.05),
                  2400),
        "plain": (dict(), 400),
    }
    s3_overrides, d2_train = variants[s3_label]

    cfg = small_config()
    seg, _ = ensure_segmentor(cfg, "/root/pkg/.acceptance_cache", say)
    cases = build_eval_cases(cfg.scene, cfg.eval.eval_scenes,
                             cfg.data.dilate_px, 0)
    d1 = build_paired_corpus(cfg.scene, 0, cfg.data.d1_train,
                             cfg.data.mask_min_area, cfg.data.mask_max_area,
                             cfg.data.max_entity_overlap)
    d1_val = build_paired_corpus(cfg.scene, 100003, cfg.data.d1_val,
                                 cfg.data.mask_min_area,
                                 cfg.data.mask_max_area,
                                 cfg.data.max_entity_overlap)
    d2 = build_unpaired_corpus(cfg.scene, 0, d2_train, cfg.data.dilate_px)

    schedule = NoiseSchedule(cfg.schedule.steps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end)
    teacher = build_denoiser(schedule, "eps", 0, cfg.model.base_width,
                             cfg.model.time_dim)
    t_path = OUT / f"teacher_{stage1_iters}.pt"
    if t_path.exists():
        teacher.load_state_dict(torch.load(t_path, weights_only=True))
        teacher.eval()
        say(f"teacher({stage1_iters}): cached")
    else:
        s1 = dataclasses.replace(cfg.stage1, iterations=stage1_iters)
        res = train_stage1(teacher, d1, d1_val, s1, 0)
        torch.save(teacher.state_dict(), t_path)
        say(f"teacher({stage1_iters}): val {res.val_initial:.4f} -> "
            f"{res.val_final:.4f} ({res.elapsed:.0f}s)")
        rep = evaluate(teacher_eraser(teacher), cases, seg,
                       cfg.eval.ios_threshold, cfg.eval.prob_threshold)
        say(f"teacher({stage1_iters}) ODE-20: MSN={rep.msn:.4f} "
            f"MARS={rep.mars:.4f}")

    models = ErasureModels(schedule, teacher, segmentor=seg)
    models.ensure_distillation_models(0)
    s_path = OUT / f"student_{stage1_iters}.pt"
    if s_path.exists():
        blob = torch.load(s_path, weights_only=True)
        models.student.load_state_dict(blob["student"])
        models.fake_score.load_state_dict(blob["fake"])
        models.discriminator.load_state_dict(blob["disc"])
        say("student: cached")
    else:
        res = train_stage2(models, d1, cfg.stage2, 0, weights=cfg.weights)
        torch.save({"student": models.student.state_dict(),
                    "fake": models.fake_score.state_dict(),
                    "disc": models.discriminator.state_dict()}, s_path)
        say(f"student distilled ({res.elapsed:.0f}s)")
        models.student.eval()
        eraser = make_student_eraser(models.student, cfg.eval.num_steps,
                                     cfg.eval.mid_timestep, cfg.eval.composite)
        rep = evaluate(eraser, cases, seg, cfg.eval.ios_threshold,
                       cfg.eval.prob_threshold)
        say(f"baseline({stage1_iters}): MSN={rep.msn:.4f} MARS={rep.mars:.4f}")

    s3 = dataclasses.replace(cfg.stage3, **s3_overrides)
    say(f"stage3 {s3_label}: {s3_overrides}")
    row_dir = OUT / f"row_{stage1_iters}_{s3_label}"
    res = train_stage3(models, d1, d2, s3, 0, weights=cfg.weights,
                       flags=StageThreeFlags(), out_dir=str(row_dir))
    say(f"stage 3 trained ({res.elapsed:.0f}s)")
    recs = LossLog.read(row_dir / "stage3_loss.log")
    d2r = [r for r in recs if r["dataset"] == "d2"]
    k = 6
    n = len(d2r) // k
    say("d2 sundries trend: " +
        str([round(float(np.mean([r["sundries"] for r in d2r[i*n:(i+1)*n]])), 2)
             for i in range(k)]))
    models.student.eval()
    for ns in (1, 2):
        eraser = make_student_eraser(models.student, ns,
                                     cfg.eval.mid_timestep, cfg.eval.composite)
        rep = evaluate(eraser, cases, seg, cfg.eval.ios_threshold,
                       cfg.eval.prob_threshold)
        say(f"full({stage1_iters},{s3_label}) steps={ns}: MSN={rep.msn:.4f} "
            f"MARS={rep.mars:.4f}")


if __name__ == "__main__":
    main()
