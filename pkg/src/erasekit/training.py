"""Three-stage erasure training.

Stage 1 fine-tunes the conditional teacher with plain noise-prediction MSE on
paired data.  Stage 2 distills a two-step student from the frozen teacher:
the student regresses the teacher's multi-step ODE output, receives a
distribution-matching gradient from a real/fake score pair, and plays a
least-squares GAN over the teacher's mid-network features.  Stage 3 continues
with mixed paired/unpaired batches; unpaired batches enter at the terminal
timestep with pure noise and are supervised only by the pair-free losses
(sundries suppression, feature coherence) plus the distribution-matching and
generator-side GAN terms.

Every stage derives its per-step randomness from (seed, stage, step), so a
run checkpointed and resumed continues bit-identically.
"""

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import Condition, Denoiser, NoiseSchedule, ode_sample
from .losses import (FeatureDiscriminator, LossWeights, adaptive_loss_weight,
                     combined_loss, detect_sundries, distillation_loss,
                     distribution_matching_grad, distribution_matching_loss,
                     feature_coherence_loss, lsgan_losses,
                     sundries_suppression_loss, IOS_THRESHOLD, PROB_THRESHOLD)

_SEED_SALT = 0xE2A5E


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the offending step."""

    def __init__(self, stage: int, step: int, values: dict):
        self.stage = stage
        self.step = step
        self.values = values
        shown = ", ".join(f"{k}={v}" for k, v in values.items())
        super().__init__(f"stage {stage} diverged at step {step}: {shown}")


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters of one training stage.

    The anchor fields implement warm-up from uniform anchor sampling to the
    late-heavy target distribution; jitter is an integer offset applied after
    anchor choice, clamped to the schedule range.
    """

    stage: int
    iterations: int
    batch_size: int
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    timestep_anchors: tuple[int, ...] = (249, 499, 749, 999)
    anchor_jitter: int = 25
    anchor_warmup: float = 0.5
    anchor_target_probs: tuple[float, ...] = (0.1, 0.1, 0.2, 0.6)
    ode_steps: int = 20
    distill_metric: str = "perceptual"
    dmd_t_min: int = 20
    dmd_t_max: int = 980
    fake_lr: float | None = None
    disc_lr: float | None = None
    grad_clip: float = 0.0
    d1_steps: int = 1
    d2_steps: int = 1
    d2_timestep: int = 999
    ios_threshold: float = IOS_THRESHOLD
    prob_threshold: float = PROB_THRESHOLD
    val_size: int = 64
    grid_every: int = 0
    save_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("bad iteration/batch settings")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("bad optimizer settings")
        if not self.timestep_anchors or list(self.timestep_anchors) != sorted(
                self.timestep_anchors):
            raise ValueError("timestep anchors must be sorted and non-empty")
        if len(self.anchor_target_probs) != len(self.timestep_anchors):
            raise ValueError("one target probability per anchor required")
        if abs(sum(self.anchor_target_probs) - 1.0) > 1e-6:
            raise ValueError("anchor target probabilities must sum to 1")
        if self.anchor_jitter < 0 or not (0 <= self.anchor_warmup <= 1):
            raise ValueError("bad anchor jitter/warmup")
        if self.distill_metric not in ("l2", "perceptual"):
            raise ValueError(f"unknown distill metric {self.distill_metric!r}")
        if not (1 <= self.dmd_t_min <= self.dmd_t_max):
            raise ValueError("bad dmd timestep range")
        if self.stage == 3 and self.d1_steps + self.d2_steps < 1:
            raise ValueError("stage 3 needs a non-empty batch pattern")


@dataclass(frozen=True)
class StageThreeFlags:
    """Loss/data routing switches for ablations; the full model enables all."""

    use_efc: bool = True
    use_ss: bool = True
    use_d2: bool = True

    def tag(self) -> str:
        return ("efc" if self.use_efc else "noefc") + \
               ("-ss" if self.use_ss else "-noss") + \
               ("-d2" if self.use_d2 else "-nod2")


def sample_timestep(anchors, progress: float, rng, jitter: int = 25,
                    warmup: float = 0.5,
                    target_probs=(0.1, 0.1, 0.2, 0.6),
                    t_max: int = 1000) -> int:
    """Draw a training timestep near one of the anchors.

    Anchor probabilities interpolate linearly from uniform to target_probs as
    progress approaches `warmup` (then stay there).  An integer jitter in
    [-jitter, jitter] is added and the result clamped to [1, t_max].
    """
    if not (0.0 <= progress <= 1.0):
        raise ValueError("progress must lie in [0, 1]")
    anchors = list(anchors)
    if len(target_probs) != len(anchors):
        raise ValueError("one target probability per anchor required")
    frac = 1.0 if warmup <= 0 else min(1.0, progress / warmup)
    probs = (1 - frac) / len(anchors) + frac * np.asarray(target_probs, dtype=float)
    probs = probs / probs.sum()
    idx = int(rng.choice(len(anchors), p=probs))
    t = int(anchors[idx])
    if jitter:
        t += int(rng.integers(-jitter, jitter + 1))
    return int(min(max(t, 1), t_max))


class LossLog:
    """Per-step key=value loss records, kept in memory and optionally on disk."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a", encoding="utf-8")
        else:
            self._fh = None

    @staticmethod
    def _format(value) -> str:
        if isinstance(value, float):
            return f"{value:.8g}"
        return str(value)

    def log(self, **fields):
        self.records.append(fields)
        if self._fh is not None:
            line = " ".join(f"{k}={self._format(v)}" for k, v in fields.items())
            self._fh.write(line + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @staticmethod
    def read(path) -> list[dict]:
        records = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = {}
            for item in line.split():
                key, value = item.split("=", 1)
                try:
                    rec[key] = int(value)
                except ValueError:
                    try:
                        rec[key] = float(value)
                    except ValueError:
                        rec[key] = value
            records.append(rec)
        return records


@dataclass
class StageResult:
    steps_run: int
    elapsed: float
    log: LossLog
    checkpoint_path: Path | None = None
    val_initial: float | None = None
    val_final: float | None = None


# --------------------------------------------------------------------------
# determinism and data plumbing


def _step_rngs(seed: int, stage: int, step: int):
    """Independent numpy and torch generators for one training step."""
    ss = np.random.SeedSequence([_SEED_SALT, seed, stage, step])
    np_ss, torch_ss = ss.spawn(2)
    gen = torch.Generator().manual_seed(int(torch_ss.generate_state(1, np.uint64)[0] >> 1))
    return np.random.default_rng(np_ss), gen


def build_denoiser(schedule: NoiseSchedule, prediction: str, seed: int,
                   base_width: int = 32, time_dim: int = 128) -> Denoiser:
    """Seed-deterministic denoiser construction."""
    torch.manual_seed(seed)
    return Denoiser(schedule, prediction=prediction, base_width=base_width,
                    time_dim=time_dim)


def init_student_from_teacher(teacher: Denoiser) -> Denoiser:
    """Fresh student with the teacher's weights copied bit-exactly.

    The student interprets its output as the clean image rather than the
    noise, so its early predictions are poor until distillation reshapes it.
    """
    student = Denoiser(teacher.schedule, prediction="x0",
                       base_width=teacher.base_width, time_dim=teacher.time_dim)
    student.load_state_dict(teacher.state_dict())
    return student


def paired_batch(samples) -> tuple[torch.Tensor, Condition]:
    """Stack paired samples into (clean images, condition), NCHW float32."""
    y = torch.from_numpy(np.stack([s.y for s in samples])).permute(0, 3, 1, 2).float()
    xm = torch.from_numpy(np.stack([s.x for s in samples])).permute(0, 3, 1, 2).float()
    m = torch.from_numpy(np.stack([s.mask for s in samples])).float().unsqueeze(1)
    return y, Condition(x_m=xm, m_in=m)


def unpaired_batch(samples) -> Condition:
    xm = torch.from_numpy(np.stack([s.x for s in samples])).permute(0, 3, 1, 2).float()
    m = torch.from_numpy(np.stack([s.mask for s in samples])).float().unsqueeze(1)
    return Condition(x_m=xm, m_in=m)


def composite(prediction: torch.Tensor, cond: Condition) -> torch.Tensor:
    """Paste the prediction into the mask region of the conditioning image."""
    return cond.m_in * prediction + (1.0 - cond.m_in) * cond.x_m


def _freeze(module: nn.Module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def _scalar(value) -> float:
    if torch.is_tensor(value):
        return float(value.detach())
    return float(value)


def _check_finite(stage: int, step: int, values: dict):
    bad = {k: _scalar(v) for k, v in values.items()
           if torch.is_tensor(v) and not bool(torch.isfinite(v).all())}
    if bad:
        raise TrainingDiverged(stage, step, bad)


# --------------------------------------------------------------------------
# checkpoint plumbing (models + optimizers, bit-exact resume)


def _optimizer_tensors(opt, prefix: str):
    tensors = {}
    sd = opt.state_dict()
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if torch.is_tensor(value):
                arr = value.detach().cpu().numpy()
            else:
                arr = np.asarray(value)
            tensors[f"{prefix}.state.{idx}.{key}"] = arr
    groups = [{k: v for k, v in g.items() if k != "params"}
              for g in sd["param_groups"]]
    return tensors, json.dumps(groups)


def _load_optimizer(opt, tensors: dict, prefix: str, groups_json: str):
    state: dict = {}
    marker = f"{prefix}.state."
    for name, arr in tensors.items():
        if not name.startswith(marker):
            continue
        idx, key = name[len(marker):].split(".", 1)
        value = torch.from_numpy(arr.copy())
        if value.ndim == 0 and key == "step":
            value = value.clone()
        state.setdefault(int(idx), {})[key] = value
    sd = opt.state_dict()
    for group, saved in zip(sd["param_groups"], json.loads(groups_json)):
        group.update(saved)
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def save_training_checkpoint(path, modules: dict, optimizers: dict | None = None,
                             meta: dict | None = None, config_hash=None) -> Path:
    """Serialize named modules (and optimizer states) into one container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {str(k): str(v) for k, v in (meta or {}).items()}
    tensors = {}
    schedule = None
    for name, module in modules.items():
        for key, value in module.state_dict().items():
            tensors[f"{name}.{key}"] = value.detach().cpu().numpy()
        schedule = getattr(module, "schedule", schedule)
    if schedule is not None:
        tensors["schedule.alpha_bar"] = schedule.alpha_bar
        meta.setdefault("schedule.steps", str(schedule.steps))
        meta.setdefault("schedule.beta_start", repr(schedule.beta_start))
        meta.setdefault("schedule.beta_end", repr(schedule.beta_end))
    for name, opt in (optimizers or {}).items():
        opt_tensors, groups = _optimizer_tensors(opt, f"opt_{name}")
        tensors.update(opt_tensors)
        meta[f"opt_{name}.groups"] = groups
    save_checkpoint(path, tensors, meta, config_hash=config_hash)
    return path


def load_module_state(tensors: dict, prefix: str, module: nn.Module):
    marker = prefix + "."
    state = {name[len(marker):]: torch.from_numpy(arr.copy())
             for name, arr in tensors.items()
             if name.startswith(marker) and not name.startswith("opt_")}
    if not state:
        raise KeyError(f"checkpoint holds no tensors under {prefix!r}")
    module.load_state_dict(state, strict=True)


def load_schedule(tensors: dict, meta: dict) -> NoiseSchedule:
    schedule = NoiseSchedule(int(meta["schedule.steps"]),
                             float(meta["schedule.beta_start"]),
                             float(meta["schedule.beta_end"]))
    stored = tensors.get("schedule.alpha_bar")
    if stored is not None and not np.allclose(stored, schedule.alpha_bar,
                                              rtol=1e-12, atol=0):
        raise ValueError("stored schedule disagrees with its parameters")
    return schedule


def load_denoiser(path, role: str | None = None,
                  expected_config_hash=None) -> tuple[Denoiser, dict]:
    """Rebuild a denoiser from any stage checkpoint.

    role picks which model to load ("teacher", "student" or "fake"); by
    default the first of student/teacher/fake present in the file wins.
    """
    tensors, meta = load_checkpoint(path, expected_config_hash)
    if role is None:
        for candidate in ("student", "teacher", "fake"):
            if any(k.startswith(candidate + ".") for k in tensors):
                role = candidate
                break
        else:
            raise KeyError("checkpoint holds no denoiser tensors")
    schedule = load_schedule(tensors, meta)
    # the stored prediction mode describes the checkpoint's primary model;
    # the auxiliary fake-score model always predicts noise
    if role == "fake":
        prediction = "eps"
    else:
        prediction = meta.get("prediction", "x0" if role == "student" else "eps")
    model = Denoiser(schedule, prediction=prediction,
                     base_width=int(meta["base_width"]),
                     time_dim=int(meta["time_dim"]))
    load_module_state(tensors, role, model)
    model.eval()
    return model, meta


def _restore(resume_from, modules: dict, optimizers: dict):
    tensors, meta = load_checkpoint(resume_from)
    for name, module in modules.items():
        load_module_state(tensors, name, module)
    for name, opt in optimizers.items():
        _load_optimizer(opt, tensors, f"opt_{name}", meta[f"opt_{name}.groups"])
    return int(meta["step"]), meta


# --------------------------------------------------------------------------
# stage 1: teacher fine-tune


def _stage1_val_loss(teacher: Denoiser, val_samples, seed: int,
                     batch_size: int = 32) -> float:
    """Denoising MSE on a fixed (t, noise) assignment; deterministic."""
    if not val_samples:
        return float("nan")
    schedule = teacher.schedule
    # context id 101 keeps the fixed validation draw disjoint from any
    # training step's (seed, stage, step) stream
    npr, gen = _step_rngs(seed, 101, 0)
    t_all = torch.from_numpy(npr.integers(1, schedule.steps + 1,
                                          size=len(val_samples)))
    was_training = teacher.training
    teacher.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(val_samples), batch_size):
            chunk = val_samples[start:start + batch_size]
            x0, cond = paired_batch(chunk)
            noise = torch.randn(x0.shape, generator=gen)
            t = t_all[start:start + len(chunk)]
            x_t = schedule.add_noise(x0, t, noise)
            eps_hat = teacher(x_t, t, cond)
            total += float(F.mse_loss(eps_hat, noise, reduction="sum")) / x0[0].numel()
    if was_training:
        teacher.train()
    return total / len(val_samples)


def train_stage1(teacher: Denoiser, train_samples, val_samples,
                 config: StageConfig, seed: int = 0, out_dir=None,
                 resume_from=None, config_hash=None) -> StageResult:
    """Noise-prediction fine-tuning of the conditional teacher on paired data.

    With zero iterations the saved checkpoint equals the initialization.  A
    non-finite loss aborts with TrainingDiverged.
    """
    if config.stage != 1:
        raise ValueError("config.stage must be 1")
    if not train_samples:
        raise ValueError("no training samples")
    schedule = teacher.schedule
    out_dir = Path(out_dir) if out_dir else None
    log = LossLog(out_dir / "stage1_loss.log" if out_dir else None)
    opt = torch.optim.AdamW(teacher.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    start = 0
    base_elapsed = 0.0
    if resume_from is not None:
        start, meta = _restore(resume_from, {"teacher": teacher},
                               {"teacher": opt})
        base_elapsed = float(meta.get("elapsed", 0.0))

    def _meta(step, elapsed, extra=()):
        m = {"stage": 1, "step": step, "seed": seed, "elapsed": repr(elapsed),
             "prediction": teacher.prediction, "base_width": teacher.base_width,
             "time_dim": teacher.time_dim}
        m.update(extra)
        return m

    val_initial = _stage1_val_loss(teacher, val_samples, seed)
    began = time.perf_counter()
    teacher.train()
    for step in range(start, config.iterations):
        npr, gen = _step_rngs(seed, 1, step)
        idx = npr.integers(0, len(train_samples), size=config.batch_size)
        x0, cond = paired_batch([train_samples[int(i)] for i in idx])
        t = torch.from_numpy(npr.integers(1, schedule.steps + 1,
                                          size=config.batch_size))
        noise = torch.randn(x0.shape, generator=gen)
        x_t = schedule.add_noise(x0, t, noise)
        eps_hat = teacher(x_t, t, cond)
        loss = F.mse_loss(eps_hat, noise)
        _check_finite(1, step, {"eps_mse": loss})
        opt.zero_grad()
        loss.backward()
        if config.grad_clip > 0:
            nn.utils.clip_grad_norm_(teacher.parameters(), config.grad_clip)
        opt.step()
        log.log(step=step, stage=1, dataset="d1", eps_mse=_scalar(loss))
        if out_dir and config.save_every and (step + 1) % config.save_every == 0 \
                and step + 1 < config.iterations:
            save_training_checkpoint(
                out_dir / "teacher.partial.ckpt", {"teacher": teacher},
                {"teacher": opt},
                meta=_meta(step + 1, base_elapsed + time.perf_counter() - began),
                config_hash=config_hash)

    val_final = _stage1_val_loss(teacher, val_samples, seed)
    teacher.eval()
    elapsed = base_elapsed + time.perf_counter() - began
    ckpt = None
    if out_dir is not None:
        ckpt = save_training_checkpoint(
            out_dir / "teacher.ckpt", {"teacher": teacher}, {"teacher": opt},
            meta=_meta(config.iterations, elapsed,
                       {"val_initial": repr(val_initial),
                        "val_final": repr(val_final), "completed": 1}),
            config_hash=config_hash)
        (out_dir / "teacher.partial.ckpt").unlink(missing_ok=True)
    log.close()
    return StageResult(steps_run=config.iterations - start, elapsed=elapsed,
                       log=log, checkpoint_path=ckpt, val_initial=val_initial,
                       val_final=val_final)


# --------------------------------------------------------------------------
# stages 2 and 3


@dataclass
class ErasureModels:
    """The model ensemble shared by the distillation stages."""

    schedule: NoiseSchedule
    teacher: Denoiser
    student: Denoiser | None = None
    fake_score: Denoiser | None = None
    discriminator: FeatureDiscriminator | None = None
    segmentor: nn.Module | None = None

    def ensure_distillation_models(self, seed: int):
        """Create student/fake/discriminator copies where missing."""
        if self.student is None:
            self.student = init_student_from_teacher(self.teacher)
        if self.fake_score is None:
            self.fake_score = Denoiser(self.teacher.schedule, prediction="eps",
                                       base_width=self.teacher.base_width,
                                       time_dim=self.teacher.time_dim)
            self.fake_score.load_state_dict(self.teacher.state_dict())
        if self.discriminator is None:
            torch.manual_seed(seed ^ 0xD15C)
            self.discriminator = FeatureDiscriminator(self.teacher)


def _feature_fn(models: ErasureModels, config: StageConfig):
    if config.distill_metric != "perceptual":
        return None
    if models.segmentor is None:
        raise ValueError("perceptual distillation metric needs a segmentor")
    return models.segmentor.perceptual_features


def _paired_step_losses(models: ErasureModels, config: StageConfig, x0, cond,
                        t: int, npr, gen, feature_fn):
    """Distillation, distribution-matching and GAN losses for one paired batch."""
    schedule = models.schedule
    noise = torch.randn(x0.shape, generator=gen)
    x_t = schedule.add_noise(x0, t, noise)
    target = ode_sample(models.teacher, x_t, t, cond, steps=config.ode_steps)
    y = models.student(x_t, t, cond)
    l_distill = distillation_loss(y, target, config.distill_metric, feature_fn)

    t_dmd = int(npr.integers(config.dmd_t_min, config.dmd_t_max + 1))
    noise_dmd = torch.randn(y.shape, generator=gen)
    grad = distribution_matching_grad(y, t_dmd, cond, models.teacher,
                                      models.fake_score, noise_dmd)
    l_dmd = distribution_matching_loss(y, grad)

    t_gan = int(npr.integers(config.dmd_t_min, config.dmd_t_max + 1))
    noise_gan = torch.randn(y.shape, generator=gen)
    l_g, l_d = lsgan_losses(models.discriminator, x0, y, t_gan, cond, noise_gan)
    return y, {"distill": l_distill, "dmd": l_dmd, "gan_g": l_g, "gan_d": l_d}


def _fake_score_update(models: ErasureModels, config: StageConfig, fake_opt,
                       y_detached, cond, npr, gen) -> float:
    """One denoising step of the fake-score model on generator outputs."""
    schedule = models.schedule
    t = torch.from_numpy(npr.integers(1, schedule.steps + 1,
                                      size=y_detached.shape[0]))
    noise = torch.randn(y_detached.shape, generator=gen)
    x_t = schedule.add_noise(y_detached, t, noise)
    eps_hat = models.fake_score(x_t, t, cond)
    loss = F.mse_loss(eps_hat, noise)
    fake_opt.zero_grad()
    loss.backward()
    if config.grad_clip > 0:
        nn.utils.clip_grad_norm_(models.fake_score.parameters(), config.grad_clip)
    fake_opt.step()
    return _scalar(loss)


def _make_stage_optimizers(models: ErasureModels, config: StageConfig):
    student_opt = torch.optim.AdamW(models.student.parameters(),
                                    lr=config.learning_rate,
                                    weight_decay=config.weight_decay)
    fake_opt = torch.optim.AdamW(models.fake_score.parameters(),
                                 lr=config.fake_lr or config.learning_rate,
                                 weight_decay=config.weight_decay)
    disc_opt = torch.optim.AdamW(models.discriminator.parameters(),
                                 lr=config.disc_lr or config.learning_rate,
                                 weight_decay=config.weight_decay)
    return student_opt, fake_opt, disc_opt


def _save_stage_checkpoint(out_dir, name, models, opts, meta, config_hash):
    return save_training_checkpoint(
        Path(out_dir) / name,
        {"student": models.student, "fake": models.fake_score,
         "disc": models.discriminator},
        {"student": opts[0], "fake": opts[1], "disc": opts[2]},
        meta=meta, config_hash=config_hash)


def train_stage2(models: ErasureModels, train_samples, config: StageConfig,
                 seed: int = 0, weights: LossWeights | None = None,
                 out_dir=None, resume_from=None, config_hash=None) -> StageResult:
    """Distill the two-step student from the frozen teacher on paired data."""
    if config.stage != 2:
        raise ValueError("config.stage must be 2")
    if not train_samples:
        raise ValueError("no training samples")
    weights = weights or LossWeights()
    models.ensure_distillation_models(seed)
    _freeze(models.teacher)
    if models.segmentor is not None:
        _freeze(models.segmentor)
    feature_fn = _feature_fn(models, config)
    student_opt, fake_opt, disc_opt = _make_stage_optimizers(models, config)

    out_dir = Path(out_dir) if out_dir else None
    log = LossLog(out_dir / "stage2_loss.log" if out_dir else None)
    start = 0
    base_elapsed = 0.0
    if resume_from is not None:
        start, meta = _restore(
            resume_from,
            {"student": models.student, "fake": models.fake_score,
             "disc": models.discriminator},
            {"student": student_opt, "fake": fake_opt, "disc": disc_opt})
        base_elapsed = float(meta.get("elapsed", 0.0))

    def _meta(step, elapsed, extra=()):
        m = {"stage": 2, "step": step, "seed": seed, "elapsed": repr(elapsed),
             "prediction": "x0", "base_width": models.student.base_width,
             "time_dim": models.student.time_dim}
        m.update(extra)
        return m

    began = time.perf_counter()
    models.student.train()
    models.fake_score.train()
    models.discriminator.train()
    for step in range(start, config.iterations):
        npr, gen = _step_rngs(seed, 2, step)
        progress = step / max(1, config.iterations)
        t = sample_timestep(config.timestep_anchors, progress, npr,
                            config.anchor_jitter, config.anchor_warmup,
                            config.anchor_target_probs, models.schedule.steps)
        idx = npr.integers(0, len(train_samples), size=config.batch_size)
        x0, cond = paired_batch([train_samples[int(i)] for i in idx])
        y, parts = _paired_step_losses(models, config, x0, cond, t, npr, gen,
                                       feature_fn)
        l_gan = 0.5 * parts["gan_g"] + 0.5 * parts["gan_d"].detach()
        total = combined_loss({"distill": parts["distill"], "dmd": parts["dmd"],
                               "gan": l_gan}, weights)
        _check_finite(2, step, {**parts, "total": total})

        student_opt.zero_grad()
        total.backward()
        if config.grad_clip > 0:
            nn.utils.clip_grad_norm_(models.student.parameters(), config.grad_clip)
        student_opt.step()

        disc_opt.zero_grad()
        parts["gan_d"].backward()
        disc_opt.step()

        fake_mse = _fake_score_update(models, config, fake_opt, y.detach(),
                                      cond, npr, gen)
        log.log(step=step, stage=2, dataset="d1", t=t,
                distill=_scalar(parts["distill"]), dmd=_scalar(parts["dmd"]),
                gan_g=_scalar(parts["gan_g"]), gan_d=_scalar(parts["gan_d"]),
                gan=_scalar(l_gan), fake_mse=fake_mse, total=_scalar(total))
        if out_dir and config.grid_every and (step + 1) % config.grid_every == 0:
            _dump_grid(out_dir, 2, step, cond, models, x0)
        if out_dir and config.save_every and (step + 1) % config.save_every == 0 \
                and step + 1 < config.iterations:
            _save_stage_checkpoint(
                out_dir, "student.partial.ckpt", models,
                (student_opt, fake_opt, disc_opt),
                _meta(step + 1, base_elapsed + time.perf_counter() - began),
                config_hash)

    models.student.eval()
    elapsed = base_elapsed + time.perf_counter() - began
    ckpt = None
    if out_dir is not None:
        ckpt = _save_stage_checkpoint(
            out_dir, "student.ckpt", models,
            (student_opt, fake_opt, disc_opt),
            _meta(config.iterations, elapsed, {"completed": 1}),
            config_hash)
        (out_dir / "student.partial.ckpt").unlink(missing_ok=True)
    log.close()
    return StageResult(steps_run=config.iterations - start, elapsed=elapsed,
                       log=log, checkpoint_path=ckpt)


def _pair_free_losses(seg_pred, cond: Condition, flags: StageThreeFlags,
                      config: StageConfig, want_ss: bool):
    """Per-batch sundries-suppression / feature-coherence losses (means)."""
    batch = len(cond)
    l_ss = seg_pred.probs.new_zeros(())
    l_efc = seg_pred.probs.new_zeros(())
    n_sundries = 0
    n_eligible = 0
    for i in range(batch):
        m2d = cond.m_in[i, 0]
        if want_ss:
            report = detect_sundries(seg_pred.probs[i], seg_pred.masks[i], m2d,
                                     config.ios_threshold, config.prob_threshold)
            n_sundries += len(report.indices)
            l_ss = l_ss + sundries_suppression_loss(seg_pred.probs[i],
                                                    seg_pred.masks[i], report)
        if flags.use_efc:
            efc, eligible = feature_coherence_loss(seg_pred.features[i],
                                                   seg_pred.masks[i], m2d)
            n_eligible += len(eligible)
            l_efc = l_efc + efc
    return l_ss / batch, l_efc / batch, n_sundries, n_eligible


def train_stage3(models: ErasureModels, d1_samples, d2_samples,
                 config: StageConfig, seed: int = 0,
                 weights: LossWeights | None = None,
                 flags: StageThreeFlags | None = None, out_dir=None,
                 resume_from=None, config_hash=None) -> StageResult:
    """Joint stage: distillation losses on paired batches, pair-free erasure
    supervision on unpaired batches fed pure noise at the terminal timestep.

    Paired and unpaired batches alternate following the configured pattern.
    Sundries suppression applies to unpaired batches (or, in the ablation
    without unpaired data, to paired ones); feature coherence applies to both.
    The discriminator updates only when ground-truth images are in the batch.
    """
    if config.stage != 3:
        raise ValueError("config.stage must be 3")
    weights = weights or LossWeights()
    flags = flags or StageThreeFlags()
    if not d1_samples:
        raise ValueError("no paired samples")
    if flags.use_d2 and not d2_samples:
        raise ValueError("no unpaired samples but use_d2 is set")
    if models.segmentor is None:
        raise ValueError("stage 3 needs a trained segmentor")
    models.ensure_distillation_models(seed)
    _freeze(models.teacher)
    _freeze(models.segmentor)
    feature_fn = _feature_fn(models, config)
    student_opt, fake_opt, disc_opt = _make_stage_optimizers(models, config)

    out_dir = Path(out_dir) if out_dir else None
    log = LossLog(out_dir / "stage3_loss.log" if out_dir else None)
    start = 0
    base_elapsed = 0.0
    if resume_from is not None:
        start, meta = _restore(
            resume_from,
            {"student": models.student, "fake": models.fake_score,
             "disc": models.discriminator},
            {"student": student_opt, "fake": fake_opt, "disc": disc_opt})
        base_elapsed = float(meta.get("elapsed", 0.0))
        if meta.get("flags", flags.tag()) != flags.tag():
            raise ValueError(f"checkpoint was trained with flags "
                             f"{meta['flags']}, not {flags.tag()}")

    def _meta(step, elapsed, extra=()):
        m = {"stage": 3, "step": step, "seed": seed, "elapsed": repr(elapsed),
             "prediction": "x0", "base_width": models.student.base_width,
             "time_dim": models.student.time_dim, "flags": flags.tag()}
        m.update(extra)
        return m

    if flags.use_d2:
        pattern = ["d1"] * config.d1_steps + ["d2"] * config.d2_steps
    else:
        pattern = ["d1"]
    last_params = [models.student.out.weight]

    began = time.perf_counter()
    models.student.train()
    models.fake_score.train()
    models.discriminator.train()
    for step in range(start, config.iterations):
        npr, gen = _step_rngs(seed, 3, step)
        progress = step / max(1, config.iterations)
        source = pattern[step % len(pattern)]

        if source == "d1":
            t = sample_timestep(config.timestep_anchors, progress, npr,
                                config.anchor_jitter, config.anchor_warmup,
                                config.anchor_target_probs, models.schedule.steps)
            idx = npr.integers(0, len(d1_samples), size=config.batch_size)
            x0, cond = paired_batch([d1_samples[int(i)] for i in idx])
            y, parts = _paired_step_losses(models, config, x0, cond, t, npr,
                                           gen, feature_fn)
            main = parts["distill"]
            want_ss = flags.use_ss and not flags.use_d2
            seg_pred = models.segmentor(composite(y, cond)) \
                if (flags.use_efc or want_ss) else None
            l_ss = l_efc = None
            w_ss = w_efc = 0.0
            n_sun = n_eli = 0
            if seg_pred is not None:
                l_ss, l_efc, n_sun, n_eli = _pair_free_losses(
                    seg_pred, cond, flags, config, want_ss)
            loss_parts = {"distill": parts["distill"], "dmd": parts["dmd"],
                          "gan": 0.5 * parts["gan_g"] + 0.5 * parts["gan_d"].detach()}
            if flags.use_efc and l_efc is not None and l_efc.requires_grad:
                w_efc = adaptive_loss_weight(main, l_efc, last_params)
                loss_parts["efc"] = l_efc
            if want_ss and l_ss is not None and l_ss.requires_grad:
                w_ss = adaptive_loss_weight(main, l_ss, last_params)
                loss_parts["ss"] = l_ss
            total = combined_loss(loss_parts, weights, ss_weight=w_ss,
                                  efc_weight=w_efc)
            _check_finite(3, step, {**parts, "total": total})

            student_opt.zero_grad()
            total.backward()
            if config.grad_clip > 0:
                nn.utils.clip_grad_norm_(models.student.parameters(),
                                         config.grad_clip)
            student_opt.step()
            disc_opt.zero_grad()
            parts["gan_d"].backward()
            disc_opt.step()
            fake_mse = _fake_score_update(models, config, fake_opt, y.detach(),
                                          cond, npr, gen)
            record = {"step": step, "stage": 3, "dataset": "d1", "t": t,
                      "distill": _scalar(parts["distill"]),
                      "dmd": _scalar(parts["dmd"]),
                      "gan_g": _scalar(parts["gan_g"]),
                      "gan_d": _scalar(parts["gan_d"]),
                      "fake_mse": fake_mse, "total": _scalar(total)}
            if flags.use_efc and l_efc is not None:
                record.update(efc=_scalar(l_efc), w_efc=w_efc, efc_entities=n_eli)
            if want_ss and l_ss is not None:
                record.update(ss=_scalar(l_ss), w_ss=w_ss, sundries=n_sun)
            log.log(**record)
        else:
            t = config.d2_timestep
            idx = npr.integers(0, len(d2_samples), size=config.batch_size)
            cond = unpaired_batch([d2_samples[int(i)] for i in idx])
            x_t = torch.randn(cond.x_m.shape, generator=gen)
            y = models.student(x_t, t, cond)

            t_dmd = int(npr.integers(config.dmd_t_min, config.dmd_t_max + 1))
            noise_dmd = torch.randn(y.shape, generator=gen)
            grad = distribution_matching_grad(y, t_dmd, cond, models.teacher,
                                              models.fake_score, noise_dmd)
            l_dmd = distribution_matching_loss(y, grad)

            t_gan = int(npr.integers(config.dmd_t_min, config.dmd_t_max + 1))
            noise_gan = torch.randn(y.shape, generator=gen)
            d_fake = models.discriminator(y, t_gan, cond, noise_gan)
            l_g = (d_fake - 1).pow(2).mean()

            seg_pred = models.segmentor(composite(y, cond))
            l_ss, l_efc, n_sun, n_eli = _pair_free_losses(
                seg_pred, cond, flags, config, want_ss=flags.use_ss)
            main = l_dmd
            w_ss = w_efc = 0.0
            loss_parts = {"dmd": l_dmd, "gan": 0.5 * l_g}
            if flags.use_ss and l_ss.requires_grad:
                w_ss = adaptive_loss_weight(main, l_ss, last_params)
                loss_parts["ss"] = l_ss
            if flags.use_efc and l_efc.requires_grad:
                w_efc = adaptive_loss_weight(main, l_efc, last_params)
                loss_parts["efc"] = l_efc
            total = combined_loss(loss_parts, weights, ss_weight=w_ss,
                                  efc_weight=w_efc)
            _check_finite(3, step, {"dmd": l_dmd, "gan_g": l_g, "ss": l_ss,
                                    "efc": l_efc, "total": total})

            student_opt.zero_grad()
            total.backward()
            if config.grad_clip > 0:
                nn.utils.clip_grad_norm_(models.student.parameters(),
                                         config.grad_clip)
            student_opt.step()
            fake_mse = _fake_score_update(models, config, fake_opt, y.detach(),
                                          cond, npr, gen)
            record = {"step": step, "stage": 3, "dataset": "d2", "t": t,
                      "dmd": _scalar(l_dmd), "gan_g": _scalar(l_g),
                      "fake_mse": fake_mse, "total": _scalar(total)}
            if flags.use_ss:
                record.update(ss=_scalar(l_ss), w_ss=w_ss, sundries=n_sun)
            if flags.use_efc:
                record.update(efc=_scalar(l_efc), w_efc=w_efc, efc_entities=n_eli)
            log.log(**record)

        if out_dir and config.grid_every and (step + 1) % config.grid_every == 0:
            _dump_grid(out_dir, 3, step, cond, models, None)
        if out_dir and config.save_every and (step + 1) % config.save_every == 0 \
                and step + 1 < config.iterations:
            _save_stage_checkpoint(
                out_dir, "student_joint.partial.ckpt", models,
                (student_opt, fake_opt, disc_opt),
                _meta(step + 1, base_elapsed + time.perf_counter() - began),
                config_hash)

    models.student.eval()
    elapsed = base_elapsed + time.perf_counter() - began
    ckpt = None
    if out_dir is not None:
        ckpt = _save_stage_checkpoint(
            out_dir, "student_joint.ckpt", models,
            (student_opt, fake_opt, disc_opt),
            _meta(config.iterations, elapsed, {"completed": 1}),
            config_hash)
        (out_dir / "student_joint.partial.ckpt").unlink(missing_ok=True)
    log.close()
    return StageResult(steps_run=config.iterations - start, elapsed=elapsed,
                       log=log, checkpoint_path=ckpt)


def _dump_grid(out_dir, stage: int, step: int, cond: Condition,
               models: ErasureModels, x0):
    from .evaluation import save_image_grid
    from .diffusion import student_sample

    rows = [cond.x_m, cond.m_in.expand(-1, 3, -1, -1)]
    sample = student_sample(models.student, cond, num_steps=2, seed=step)
    rows.append(sample)
    if x0 is not None:
        rows.append(x0)
    grid_dir = Path(out_dir) / "grids"
    grid_dir.mkdir(parents=True, exist_ok=True)
    save_image_grid(grid_dir / f"stage{stage}_step{step + 1:06d}.png",
                    [r[:8] for r in rows])
