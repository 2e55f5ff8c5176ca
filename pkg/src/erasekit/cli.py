"""Command-line entry points.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import config_hash, load_config, preset, to_ini_text


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; these tools reserve 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="erasekit",
                     description="Few-step diffusion object erasure on "
                                 "procedural scenes.")
    parser.add_argument("--config", metavar="INI",
                        help="INI file overriding preset values")
    parser.add_argument("--preset", default="default",
                        choices=("default", "small"),
                        help="base configuration preset")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="runs/default", metavar="DIR",
                        help="experiment directory for checkpoints and logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("show-config", help="print the effective configuration")

    p = sub.add_parser("gen-data", help="write training datasets to disk")

    p = sub.add_parser("train-seg", help="train (or load) the entity segmentor")

    p = sub.add_parser("train-teacher", help="stage 1: teacher fine-tune")

    p = sub.add_parser("distill", help="stages 1-2: distill the few-step student")

    p = sub.add_parser("train-joint", help="stage 3: joint pair-free training")
    p.add_argument("--no-efc", action="store_true",
                   help="drop the feature-coherence loss")
    p.add_argument("--no-ss", action="store_true",
                   help="drop the sundries-suppression loss")
    p.add_argument("--no-d2", action="store_true",
                   help="train on paired batches only")

    p = sub.add_parser("infer", help="erase a masked region from one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, metavar="PNG")
    p.add_argument("--mask", required=True, metavar="PNG")
    p.add_argument("--output", required=True, metavar="PNG")
    p.add_argument("--steps", type=int, default=None, choices=(1, 2))

    p = sub.add_parser("eval", help="score an eraser on held-out cases")
    p.add_argument("--checkpoint",
                   help="student checkpoint (required for the model eraser)")
    p.add_argument("--segmentor", help="segmentor checkpoint "
                                       "(default: <out>/segmentor.ckpt)")
    p.add_argument("--eraser", default="student",
                   choices=("student", "identity", "oracle"))
    p.add_argument("--eval-seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train and score loss-routing variants")
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated training seeds")
    p.add_argument("--rows", default="default", choices=("default", "grid"),
                   help="default = baseline+full; grid = all variants")
    p.add_argument("--eval-seed", type=int, default=0)

    p = sub.add_parser("report", help="print the ablation table of a run")
    return parser


def _load_experiment(args):
    cfg = preset(args.preset)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    return cfg


def _cmd_show_config(cfg, args):
    sys.stdout.write(to_ini_text(cfg))
    print(f"# config hash: {config_hash(cfg).hex()}")
    return 0


def _cmd_gen_data(cfg, args):
    from .dataio import write_dataset
    from .scenegen import build_paired_corpus, build_unpaired_corpus

    out = Path(args.out) / "data"
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    d = cfg.data
    jobs = [
        ("d1_train.erds", build_paired_corpus(
            cfg.scene, args.seed, d.d1_train, d.mask_min_area,
            d.mask_max_area, d.max_entity_overlap)),
        ("d1_val.erds", build_paired_corpus(
            cfg.scene, args.seed + 100003, d.d1_val, d.mask_min_area,
            d.mask_max_area, d.max_entity_overlap)),
        ("d2_train.erds", build_unpaired_corpus(
            cfg.scene, args.seed, d.d2_train, d.dilate_px)),
    ]
    for name, samples in jobs:
        manifest = write_dataset(samples, out / name, config_hash=chash)
        print(f"{out / name}: {manifest['count']} samples "
              f"({manifest['kind']}, sha256 {manifest['payload_sha256'][:12]})")
    return 0


def _cmd_train_seg(cfg, args):
    from .evaluation import ensure_segmentor

    _, seconds = ensure_segmentor(cfg, args.out, progress=print)
    print(f"segmentor ready at {Path(args.out) / 'segmentor.ckpt'} "
          f"({seconds:.0f}s)")
    return 0


def _cmd_train_teacher(cfg, args):
    from .diffusion import NoiseSchedule
    from .evaluation import _is_cached
    from .scenegen import build_paired_corpus
    from .training import build_denoiser, train_stage1

    seed_dir = Path(args.out) / f"seed{args.seed}"
    chash = config_hash(cfg)
    if _is_cached(seed_dir / "teacher.ckpt", chash):
        print(f"teacher already trained: {seed_dir / 'teacher.ckpt'}")
        return 0
    d = cfg.data
    d1 = build_paired_corpus(cfg.scene, args.seed, d.d1_train, d.mask_min_area,
                             d.mask_max_area, d.max_entity_overlap)
    d1_val = build_paired_corpus(cfg.scene, args.seed + 100003, d.d1_val,
                                 d.mask_min_area, d.mask_max_area,
                                 d.max_entity_overlap)
    schedule = NoiseSchedule(cfg.schedule.steps, cfg.schedule.beta_start,
                             cfg.schedule.beta_end)
    teacher = build_denoiser(schedule, "eps", args.seed, cfg.model.base_width,
                             cfg.model.time_dim)
    res = train_stage1(teacher, d1, d1_val, cfg.stage1, args.seed,
                       out_dir=seed_dir, config_hash=chash)
    print(f"teacher: val {res.val_initial:.4f} -> {res.val_final:.4f} "
          f"in {res.elapsed:.0f}s; saved {res.checkpoint_path}")
    return 0


def _cmd_distill(cfg, args):
    from .evaluation import ensure_segmentor, train_seed_pipeline

    segmentor, _ = ensure_segmentor(cfg, args.out, progress=print)
    _, _, elapsed = train_seed_pipeline(cfg, args.seed, args.out, segmentor,
                                        progress=print)
    print(f"student ready at "
          f"{Path(args.out) / f'seed{args.seed}' / 'student.ckpt'} "
          f"(stage2 {elapsed['stage2']:.0f}s)")
    return 0


def _cmd_train_joint(cfg, args):
    from .evaluation import (_is_cached, _load_stage_states, _resume_path,
                             ensure_segmentor, train_seed_pipeline)
    from .scenegen import build_unpaired_corpus
    from .training import StageThreeFlags, train_stage3

    flags = StageThreeFlags(use_efc=not args.no_efc, use_ss=not args.no_ss,
                            use_d2=not args.no_d2)
    segmentor, _ = ensure_segmentor(cfg, args.out, progress=print)
    models, d1, _ = train_seed_pipeline(cfg, args.seed, args.out, segmentor,
                                        progress=print)
    d2 = build_unpaired_corpus(cfg.scene, args.seed, cfg.data.d2_train,
                               cfg.data.dilate_px)
    chash = config_hash(cfg)
    row_dir = Path(args.out) / f"seed{args.seed}" / f"row-{flags.tag()}"
    if _is_cached(row_dir / "student_joint.ckpt", chash):
        _load_stage_states(row_dir / "student_joint.ckpt", models)
        print(f"joint student already trained: {row_dir / 'student_joint.ckpt'}")
        return 0
    res = train_stage3(models, d1, d2, cfg.stage3, args.seed,
                       weights=cfg.weights, flags=flags, out_dir=row_dir,
                       config_hash=chash,
                       resume_from=_resume_path(row_dir / "student_joint.ckpt",
                                                chash))
    print(f"joint student saved: {res.checkpoint_path} ({res.elapsed:.0f}s)")
    return 0


def _cmd_infer(cfg, args):
    from .evaluation import erase_image, load_image, load_mask, save_image
    from .training import load_denoiser

    student, _ = load_denoiser(args.checkpoint)
    x = load_image(args.input)
    mask = load_mask(args.mask)
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image "
                         f"{x.shape[:2]}")
    # the model conditions on the image with the mask region zeroed out
    x = x * (1.0 - mask[..., None].astype(np.float32))
    steps = args.steps or cfg.eval.num_steps
    out = erase_image(student, x, mask, num_steps=steps,
                      mid_timestep=cfg.eval.mid_timestep,
                      composite=cfg.eval.composite, seed=args.seed)
    save_image(args.output, out)
    print(f"wrote {args.output}")
    return 0


def _cmd_eval(cfg, args):
    from .evaluation import (build_eval_cases, evaluate, identity_eraser,
                             load_segmentor, make_student_eraser, oracle_eraser)

    seg_path = args.segmentor or Path(args.out) / "segmentor.ckpt"
    segmentor, _ = load_segmentor(seg_path)
    cases = build_eval_cases(cfg.scene, cfg.eval.eval_scenes,
                             cfg.data.dilate_px, args.eval_seed)
    subset = None
    if args.eraser == "student":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for the student eraser")
        from .training import load_denoiser

        student, _ = load_denoiser(args.checkpoint)
        eraser = make_student_eraser(student, cfg.eval.num_steps,
                                     cfg.eval.mid_timestep, cfg.eval.composite)
    elif args.eraser == "identity":
        eraser = identity_eraser
    else:
        eraser = oracle_eraser
        subset = lambda case: case.occludes_nothing
    report = evaluate(eraser, cases, segmentor, cfg.eval.ios_threshold,
                      cfg.eval.prob_threshold, subset=subset)
    out_path = Path(args.out) / f"eval_{args.eraser}.tsv"
    report.write_tsv(out_path)
    print(f"MSN={report.msn:.4f} MARS={report.mars:.4f} "
          f"cases={report.n_cases} -> {out_path}")
    return 0


def _cmd_ablate(cfg, args):
    from .evaluation import default_rows, full_grid_rows, render_table, run_ablation

    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    if not seeds:
        raise ValueError("no seeds given")
    rows = full_grid_rows() if args.rows == "grid" else default_rows()
    result = run_ablation(cfg, seeds=seeds, rows=rows, out_dir=args.out,
                          eval_seed=args.eval_seed, progress=print)
    print()
    print(render_table(result))
    return 0


def _cmd_report(cfg, args):
    table = Path(args.out) / "table.txt"
    if not table.exists():
        raise FileNotFoundError(f"no ablation table at {table}; run "
                                "`erasekit ablate` first")
    sys.stdout.write(table.read_text(encoding="utf-8"))
    return 0


_COMMANDS = {
    "show-config": _cmd_show_config,
    "gen-data": _cmd_gen_data,
    "train-seg": _cmd_train_seg,
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "train-joint": _cmd_train_joint,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_experiment(args)
        return _COMMANDS[args.command](cfg, args)
    except KeyboardInterrupt:
        sys.stderr.write("interrupted\n")
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
