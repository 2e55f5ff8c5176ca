"""Erasure metrics and the ablation pipeline.

The metrics reuse the training-time sundries detector: an erased image is
segmented, and any predicted entity lying essentially inside the erased
region counts against the eraser.  MSN is the mean number of such residual
detections per image; MARS additionally weights each detection by its entity
probability, so it falls even when detections merely become less confident.

The ablation pipeline trains the full stack per seed, caches every stage
checkpoint keyed by the experiment config hash, and evaluates each requested
loss-routing variant on one shared case set.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, stored_config_hash
from .config import ExperimentConfig, config_hash, to_ini_text
from .diffusion import Condition, Denoiser, NoiseSchedule, student_sample
from .losses import detect_sundries
from .scenegen import (DatasetError, SceneConfig, build_paired_corpus,
                       build_unpaired_corpus, entity_occludes_nothing,
                       generate_scene, make_unpaired, scene_without_entity)
from .segmentor import EntitySegmenter, segment, train_segmentor
from .training import (ErasureModels, StageThreeFlags, build_denoiser,
                       load_module_state, train_stage1, train_stage2,
                       train_stage3)

_EVAL_SALT = 0xE7A1
_SEGMENTOR_SEED = 0


# --------------------------------------------------------------------------
# image helpers


def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path, image: np.ndarray):
    """Write an (H, W, 3) float image in [0, 1] or an (H, W) mask as PNG."""
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = image
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr).save(path)


def load_image(path) -> np.ndarray:
    """Read an image as (H, W, 3) float32 in [0, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def load_mask(path) -> np.ndarray:
    """Read a mask image as (H, W) uint8 in {0, 1} (nonzero pixels are 1)."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_image_grid(path, rows, pad: int = 2):
    """Tile one or more (N, 3, H, W) tensors into a PNG, one tensor per row."""
    tiles = []
    for row in rows:
        arr = row.detach().clamp(0, 1).cpu().numpy()
        tiles.append([np.transpose(a, (1, 2, 0)) for a in arr])
    n_cols = max(len(r) for r in tiles)
    h, w = tiles[0][0].shape[:2]
    canvas = np.ones((len(tiles) * (h + pad) - pad,
                      n_cols * (w + pad) - pad, 3), dtype=np.float32)
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            canvas[i * (h + pad):i * (h + pad) + h,
                   j * (w + pad):j * (w + pad) + w] = tile
    save_image(path, canvas)


# --------------------------------------------------------------------------
# evaluation cases and metrics


@dataclass
class EvalCase:
    """One erasure task plus the reference images the control erasers need."""

    index: int
    scene_seed: int
    entity_index: int
    x: np.ndarray            # masked input, (H, W, 3) float32
    mask: np.ndarray         # erasure mask, (H, W) uint8
    scene_image: np.ndarray  # original render, entity still present
    oracle_image: np.ndarray  # re-render without the entity
    occludes_nothing: bool
    seed: int                # per-case inference seed


def build_eval_cases(scene_config: SceneConfig, count: int,
                     dilate_px: int = 1, eval_seed: int = 0) -> list:
    """Deterministic held-out erasure cases, disjoint from training streams."""
    ss = np.random.SeedSequence([_EVAL_SALT, eval_seed])
    rng = np.random.default_rng(ss)
    stream = ss.generate_state(max(4 * count, 16))
    case_seeds = np.random.SeedSequence([_EVAL_SALT, eval_seed, 1]).generate_state(count)
    cases = []
    for raw in stream:
        if len(cases) == count:
            break
        try:
            scene = generate_scene(int(raw), scene_config)
        except DatasetError:
            continue
        k = scene.entity_masks.shape[0]
        if k == 0:
            continue
        idx = int(rng.integers(0, k))
        sample = make_unpaired(scene, idx, dilate_px)
        cases.append(EvalCase(
            index=len(cases), scene_seed=int(raw), entity_index=idx,
            x=sample.x, mask=sample.mask, scene_image=scene.image,
            oracle_image=scene_without_entity(int(raw), scene_config, idx).image,
            occludes_nothing=entity_occludes_nothing(int(raw), scene_config, idx),
            seed=int(case_seeds[len(cases)])))
    if len(cases) < count:
        raise DatasetError(f"only {len(cases)}/{count} evaluation cases possible")
    return cases


@dataclass
class MetricsReport:
    """Residual-detection metrics over a case set."""

    msn: float
    mars: float
    n_cases: int
    rows: list = field(default_factory=list)

    def write_tsv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["case\tscene_seed\tentity_index\tcount\tmars"]
        for r in self.rows:
            lines.append(f"{r['case']}\t{r['scene_seed']}\t{r['entity_index']}"
                         f"\t{r['count']}\t{r['mars']:.6f}")
        lines.append(f"# msn={self.msn:.6f} mars={self.mars:.6f} "
                     f"n={self.n_cases}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def evaluate(eraser, cases, segmentor: EntitySegmenter,
             ios_threshold: float = 0.9, prob_threshold: float = 0.2,
             subset=None) -> MetricsReport:
    """Score an eraser on the cases (optionally a subset predicate).

    The eraser is called per case as eraser(case, seed) and must return an
    (H, W, 3) image in [0, 1]; per-case seeds make the result independent of
    batching or case order.
    """
    rows = []
    total_count = 0
    total_mars = 0.0
    was_training = segmentor.training
    segmentor.eval()
    with torch.no_grad():
        for case in cases:
            if subset is not None and not subset(case):
                continue
            out = eraser(case, case.seed)
            if isinstance(out, torch.Tensor):
                out = out.detach().cpu().numpy()
            pred = segment(segmentor, np.ascontiguousarray(out))
            report = detect_sundries(pred.probs[0], pred.masks[0],
                                     torch.from_numpy(case.mask).float(),
                                     ios_threshold, prob_threshold)
            count = len(report.indices)
            mars = float(sum(report.p1[i] for i in report.indices))
            total_count += count
            total_mars += mars
            rows.append({"case": case.index, "scene_seed": case.scene_seed,
                         "entity_index": case.entity_index, "count": count,
                         "mars": mars})
    if was_training:
        segmentor.train()
    if not rows:
        raise ValueError("no evaluation cases selected")
    n = len(rows)
    return MetricsReport(msn=total_count / n, mars=total_mars / n,
                         n_cases=n, rows=rows)


# --------------------------------------------------------------------------
# erasers


def erase_image(student: Denoiser, x_masked: np.ndarray, mask: np.ndarray,
                num_steps: int = 2, mid_timestep: int = 499,
                composite: bool = True, seed: int = 0) -> np.ndarray:
    """Run the few-step eraser on one masked image; returns (H, W, 3) float."""
    xm = torch.from_numpy(np.ascontiguousarray(x_masked)).float()
    xm = xm.permute(2, 0, 1)[None]
    m = torch.from_numpy(np.ascontiguousarray(mask)).float()[None, None]
    cond = Condition(x_m=xm, m_in=m)
    out = student_sample(student, cond, num_steps=num_steps, seed=seed,
                         mid_timestep=mid_timestep, composite=composite)
    return out[0].permute(1, 2, 0).cpu().numpy()


def make_student_eraser(student: Denoiser, num_steps: int = 2,
                        mid_timestep: int = 499, composite: bool = True):
    student.eval()

    def eraser(case: EvalCase, seed: int) -> np.ndarray:
        return erase_image(student, case.x, case.mask, num_steps=num_steps,
                           mid_timestep=mid_timestep, composite=composite,
                           seed=seed)

    return eraser


def identity_eraser(case: EvalCase, seed: int) -> np.ndarray:
    """Control that erases nothing: returns the original scene render."""
    return case.scene_image


def oracle_eraser(case: EvalCase, seed: int) -> np.ndarray:
    """Control with perfect erasure: the scene re-rendered without the entity.

    Only meaningful on cases where the entity occludes nothing, since the
    re-render also restores anything the entity used to cover.
    """
    return case.oracle_image


# --------------------------------------------------------------------------
# pipeline with per-stage caching


def _is_cached(path: Path, chash: bytes) -> bool:
    if not path.exists():
        return False
    try:
        return stored_config_hash(path) == chash
    except (CheckpointError, OSError):
        return False


def _resume_path(final_path: Path, chash: bytes):
    """Mid-run checkpoint to continue from, if one matches the config."""
    partial = final_path.with_name(final_path.stem + ".partial.ckpt")
    return partial if _is_cached(partial, chash) else None


def save_segmentor(path, model: EntitySegmenter, meta: dict, chash) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    from .checkpoint import save_checkpoint

    tensors = {f"segmentor.{k}": v.detach().cpu().numpy()
               for k, v in model.state_dict().items()}
    full_meta = {"kind": "segmentor"}
    for f in ("n_queries", "feat_dim", "base_width", "query_dim",
              "decoder_layers"):
        full_meta[f] = str(getattr(model.config, f))
    full_meta.update({str(k): str(v) for k, v in meta.items()})
    save_checkpoint(path, tensors, full_meta, config_hash=chash)
    return path


def load_segmentor(path) -> tuple[EntitySegmenter, dict]:
    from .segmentor import SegmentorConfig

    tensors, meta = load_checkpoint(path)
    cfg = SegmentorConfig(n_queries=int(meta["n_queries"]),
                          feat_dim=int(meta["feat_dim"]),
                          base_width=int(meta["base_width"]),
                          query_dim=int(meta["query_dim"]),
                          decoder_layers=int(meta["decoder_layers"]))
    model = EntitySegmenter(cfg)
    load_module_state(tensors, "segmentor", model)
    model.eval()
    return model, meta


def ensure_segmentor(config: ExperimentConfig, out_dir, progress=None):
    """Train (or load the cached) shared segmentor for an experiment dir."""
    progress = progress or (lambda msg: None)
    out_dir = Path(out_dir)
    chash = config_hash(config)
    path = out_dir / "segmentor.ckpt"
    if _is_cached(path, chash):
        model, meta = load_segmentor(path)
        progress(f"segmentor: cached (recall={meta.get('recall')})")
        return model, float(meta.get("elapsed", 0.0))
    began = time.perf_counter()
    result = train_segmentor(config.scene, config.seg_train,
                             seed=_SEGMENTOR_SEED,
                             model_config=config.segmentor)
    elapsed = time.perf_counter() - began
    if not result.converged:
        raise RuntimeError(
            f"segmentor failed to converge: recall={result.report.recall:.3f}, "
            f"max blank prob={result.report.max_blank_entity_prob:.3f}")
    save_segmentor(path, result.model,
                   {"recall": repr(result.report.recall),
                    "mean_iou": repr(result.report.mean_iou),
                    "elapsed": repr(elapsed),
                    "seed": _SEGMENTOR_SEED},
                   chash)
    progress(f"segmentor: trained, recall={result.report.recall:.3f} "
             f"({elapsed:.0f}s)")
    return result.model, elapsed


@dataclass(frozen=True)
class AblationRow:
    """One loss-routing variant; flags None means the pre-joint student."""

    label: str
    flags: StageThreeFlags | None


def default_rows() -> list[AblationRow]:
    return [AblationRow("baseline", None),
            AblationRow("full", StageThreeFlags(True, True, True))]


def full_grid_rows() -> list[AblationRow]:
    return [
        AblationRow("baseline", None),
        AblationRow("d2-only", StageThreeFlags(False, False, True)),
        AblationRow("no-d2", StageThreeFlags(True, True, False)),
        AblationRow("no-ss", StageThreeFlags(True, False, True)),
        AblationRow("no-efc", StageThreeFlags(False, True, True)),
        AblationRow("full", StageThreeFlags(True, True, True)),
    ]


@dataclass
class RowMetrics:
    seed: int
    label: str
    msn: float
    mars: float
    n_cases: int
    train_seconds: float
    eval_seconds: float


@dataclass
class AblationResult:
    rows: list
    seg_seconds: float
    total_train_seconds: float
    total_eval_seconds: float
    out_dir: Path

    def labels(self):
        seen = []
        for r in self.rows:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def mean_msn(self, label: str) -> float:
        vals = [r.msn for r in self.rows if r.label == label]
        return float(np.mean(vals))

    def mean_mars(self, label: str) -> float:
        vals = [r.mars for r in self.rows if r.label == label]
        return float(np.mean(vals))

    @property
    def total_seconds(self) -> float:
        return self.seg_seconds + self.total_train_seconds + self.total_eval_seconds


def render_table(result: AblationResult) -> str:
    header = f"{'seed':>6}  {'row':<10}  {'MSN':>8}  {'MARS':>8}  {'cases':>6}"
    lines = [header, "-" * len(header)]
    for r in sorted(result.rows, key=lambda r: (r.seed, r.label)):
        lines.append(f"{r.seed:>6}  {r.label:<10}  {r.msn:>8.4f}  "
                     f"{r.mars:>8.4f}  {r.n_cases:>6}")
    lines.append("-" * len(header))
    for label in result.labels():
        lines.append(f"{'mean':>6}  {label:<10}  {result.mean_msn(label):>8.4f}  "
                     f"{result.mean_mars(label):>8.4f}  "
                     f"{sum(1 for r in result.rows if r.label == label):>6}")
    lines.append(f"total wall time: {result.total_seconds:.0f}s "
                 f"(segmentor {result.seg_seconds:.0f}s, "
                 f"training {result.total_train_seconds:.0f}s, "
                 f"evaluation {result.total_eval_seconds:.0f}s)")
    return "\n".join(lines)


def write_result_tsv(result: AblationResult, path):
    path = Path(path)
    lines = ["seed\trow\tmsn\tmars\tn_cases\ttrain_seconds\teval_seconds"]
    for r in sorted(result.rows, key=lambda r: (r.seed, r.label)):
        lines.append(f"{r.seed}\t{r.label}\t{r.msn:.6f}\t{r.mars:.6f}"
                     f"\t{r.n_cases}\t{r.train_seconds:.1f}\t{r.eval_seconds:.1f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _snapshot_states(models: ErasureModels) -> dict:
    return {
        "student": {k: v.detach().clone() for k, v in
                    models.student.state_dict().items()},
        "fake": {k: v.detach().clone() for k, v in
                 models.fake_score.state_dict().items()},
        "disc": {k: v.detach().clone() for k, v in
                 models.discriminator.state_dict().items()},
    }


def _restore_states(models: ErasureModels, snapshot: dict):
    models.student.load_state_dict(snapshot["student"])
    models.fake_score.load_state_dict(snapshot["fake"])
    models.discriminator.load_state_dict(snapshot["disc"])


def _load_stage_states(path, models: ErasureModels) -> float:
    tensors, meta = load_checkpoint(path)
    load_module_state(tensors, "student", models.student)
    load_module_state(tensors, "fake", models.fake_score)
    load_module_state(tensors, "disc", models.discriminator)
    return float(meta.get("elapsed", 0.0))


def train_seed_pipeline(config: ExperimentConfig, seed: int, out_dir,
                        segmentor: EntitySegmenter, progress=None):
    """Stages 1 and 2 for one seed, cached; returns (models, elapsed dict)."""
    progress = progress or (lambda msg: None)
    chash = config_hash(config)
    seed_dir = Path(out_dir) / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)

    d1 = build_paired_corpus(config.scene, seed, config.data.d1_train,
                             config.data.mask_min_area, config.data.mask_max_area,
                             config.data.max_entity_overlap)
    d1_val = build_paired_corpus(config.scene, seed + 100003, config.data.d1_val,
                                 config.data.mask_min_area,
                                 config.data.mask_max_area,
                                 config.data.max_entity_overlap) \
        if config.data.d1_val else []

    schedule = NoiseSchedule(config.schedule.steps, config.schedule.beta_start,
                             config.schedule.beta_end)
    teacher = build_denoiser(schedule, "eps", seed, config.model.base_width,
                             config.model.time_dim)
    elapsed = {}
    t_path = seed_dir / "teacher.ckpt"
    if _is_cached(t_path, chash):
        tensors, meta = load_checkpoint(t_path)
        load_module_state(tensors, "teacher", teacher)
        teacher.eval()
        elapsed["stage1"] = float(meta.get("elapsed", 0.0))
        progress(f"seed {seed}: teacher cached")
    else:
        res = train_stage1(teacher, d1, d1_val, config.stage1, seed,
                           out_dir=seed_dir, config_hash=chash,
                           resume_from=_resume_path(t_path, chash))
        elapsed["stage1"] = res.elapsed
        progress(f"seed {seed}: teacher trained, val "
                 f"{res.val_initial:.4f} -> {res.val_final:.4f} "
                 f"({res.elapsed:.0f}s)")

    models = ErasureModels(schedule, teacher, segmentor=segmentor)
    models.ensure_distillation_models(seed)
    s_path = seed_dir / "student.ckpt"
    if _is_cached(s_path, chash):
        elapsed["stage2"] = _load_stage_states(s_path, models)
        progress(f"seed {seed}: student cached")
    else:
        res = train_stage2(models, d1, config.stage2, seed,
                           weights=config.weights, out_dir=seed_dir,
                           config_hash=chash,
                           resume_from=_resume_path(s_path, chash))
        elapsed["stage2"] = res.elapsed
        progress(f"seed {seed}: student distilled ({res.elapsed:.0f}s)")
    return models, d1, elapsed


def run_ablation(config: ExperimentConfig, seeds=(0, 1, 2), rows=None,
                 out_dir="ablation", eval_seed: int = 0,
                 progress=None) -> AblationResult:
    """Train and score every (seed, row) pair; everything cached by config.

    Rerunning with the same arguments reuses the cached checkpoints and
    reproduces the same table.
    """
    progress = progress or (lambda msg: None)
    rows = rows if rows is not None else default_rows()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(to_ini_text(config), encoding="utf-8")
    chash = config_hash(config)

    segmentor, seg_seconds = ensure_segmentor(config, out_dir, progress)
    cases = build_eval_cases(config.scene, config.eval.eval_scenes,
                             config.data.dilate_px, eval_seed)

    out_rows = []
    total_train = 0.0
    total_eval = 0.0
    for seed in seeds:
        models, d1, elapsed = train_seed_pipeline(config, seed, out_dir,
                                                  segmentor, progress)
        total_train += elapsed["stage1"] + elapsed["stage2"]
        base_train = elapsed["stage1"] + elapsed["stage2"]
        snapshot = _snapshot_states(models)
        d2 = build_unpaired_corpus(config.scene, seed, config.data.d2_train,
                                   config.data.dilate_px)
        seed_dir = out_dir / f"seed{seed}"
        for row in rows:
            if row.flags is None:
                _restore_states(models, snapshot)
                student = models.student
                row_train = base_train
                row_dir = seed_dir / "row-baseline"
            else:
                row_dir = seed_dir / f"row-{row.label}"
                row_dir.mkdir(parents=True, exist_ok=True)
                j_path = row_dir / "student_joint.ckpt"
                _restore_states(models, snapshot)
                if _is_cached(j_path, chash):
                    stage3_s = _load_stage_states(j_path, models)
                    progress(f"seed {seed} row {row.label}: cached")
                else:
                    res = train_stage3(models, d1, d2, config.stage3, seed,
                                       weights=config.weights, flags=row.flags,
                                       out_dir=row_dir, config_hash=chash,
                                       resume_from=_resume_path(j_path, chash))
                    stage3_s = res.elapsed
                    progress(f"seed {seed} row {row.label}: trained "
                             f"({res.elapsed:.0f}s)")
                total_train += stage3_s
                student = models.student
                row_train = base_train + stage3_s
            student.eval()
            eraser = make_student_eraser(student, config.eval.num_steps,
                                         config.eval.mid_timestep,
                                         config.eval.composite)
            began = time.perf_counter()
            report = evaluate(eraser, cases, segmentor,
                              config.eval.ios_threshold,
                              config.eval.prob_threshold)
            eval_s = time.perf_counter() - began
            total_eval += eval_s
            row_dir.mkdir(parents=True, exist_ok=True)
            report.write_tsv(row_dir / "metrics.tsv")
            progress(f"seed {seed} row {row.label}: "
                     f"MSN={report.msn:.4f} MARS={report.mars:.4f}")
            out_rows.append(RowMetrics(seed=seed, label=row.label,
                                       msn=report.msn, mars=report.mars,
                                       n_cases=report.n_cases,
                                       train_seconds=row_train,
                                       eval_seconds=eval_s))

    result = AblationResult(rows=out_rows, seg_seconds=seg_seconds,
                            total_train_seconds=total_train,
                            total_eval_seconds=total_eval, out_dir=out_dir)
    (out_dir / "table.txt").write_text(render_table(result) + "\n",
                                       encoding="utf-8")
    write_result_tsv(result, out_dir / "metrics.tsv")
    return result
