"""Training losses for pair-free erasure.

The pair-free supervision has two parts.  Sundries suppression finds predicted
entities that sit (almost) entirely inside the erasure mask with non-trivial
confidence and pushes the segmentor's view of the generated image away from
them: their entity probability is driven down (area-weighted) and their soft
masks are driven toward zero everywhere.  Feature coherence takes entities
that straddle the mask boundary and pulls the per-pixel embeddings of their
in-mask pixels toward the mean embedding of their visible (out-of-mask)
pixels, which discourages the generator from inventing content that the
segmentor reads as something new.

The distillation-side losses (ODE-target regression, distribution-matching
gradient, least-squares GAN on the teacher's mid-network features) and the
gradient-norm-balancing weight between the main and pair-free terms live here
as well.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule

IOS_THRESHOLD = 0.9
PROB_THRESHOLD = 0.2
MASK_LOG_EPS = 1e-4
MIN_OUT_REGION_PX = 16


def _binarize(mask: torch.Tensor) -> torch.Tensor:
    return mask > 0.5


def intersection_over_self(mask: torch.Tensor, m_in: torch.Tensor) -> float:
    """|mask ∩ m_in| / |mask| with both masks binarized at 0.5.

    Counting is integer-exact.  An empty binarized mask has no well-defined
    ratio and yields NaN; detection treats such entities as skipped.
    """
    if mask.shape != m_in.shape:
        raise ValueError(f"mask shapes differ: {tuple(mask.shape)} vs {tuple(m_in.shape)}")
    mb = _binarize(torch.as_tensor(mask))
    ib = _binarize(torch.as_tensor(m_in))
    self_area = int(mb.sum())
    if self_area == 0:
        return float("nan")
    inter = int((mb & ib).sum())
    return inter / self_area


@dataclass
class SundriesReport:
    """Per-entity detection bookkeeping for one image.

    indices lists the entities flagged as sundries; ios / p1 / alpha carry the
    per-entity overlap ratio, entity probability and binarized area fraction
    for all queries (ios is NaN for empty masks, which land in `skipped`).
    """

    indices: list[int]
    ios: np.ndarray
    p1: np.ndarray
    alpha: np.ndarray
    skipped: list[int] = field(default_factory=list)
    ios_threshold: float = IOS_THRESHOLD
    prob_threshold: float = PROB_THRESHOLD


def detect_sundries(probs: torch.Tensor, masks: torch.Tensor, m_in: torch.Tensor,
                    ios_threshold: float = IOS_THRESHOLD,
                    prob_threshold: float = PROB_THRESHOLD) -> SundriesReport:
    """Flag predicted entities lying essentially inside the erasure mask.

    An entity i is a sundry iff IoS(mask_i, m_in) > ios_threshold and its
    entity probability exceeds prob_threshold (both strict).  probs is (n, 2)
    with rows (no entity, entity); masks is (n, H, W); m_in is (H, W).
    """
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ValueError(f"probs must be (n, 2), got {tuple(probs.shape)}")
    if masks.ndim != 3 or masks.shape[0] != probs.shape[0]:
        raise ValueError("masks must be (n, H, W) matching probs")
    n = probs.shape[0]
    h, w = masks.shape[-2:]
    with torch.no_grad():
        ios = np.empty(n)
        alpha = np.empty(n)
        skipped = []
        for i in range(n):
            ios[i] = intersection_over_self(masks[i], m_in)
            alpha[i] = int(_binarize(masks[i]).sum()) / (h * w)
            if np.isnan(ios[i]):
                skipped.append(i)
        p1 = probs[:, 1].detach().cpu().numpy().astype(float)
    indices = [i for i in range(n)
               if not np.isnan(ios[i])
               and ios[i] > ios_threshold and p1[i] > prob_threshold]
    return SundriesReport(indices=indices, ios=ios, p1=p1, alpha=alpha,
                          skipped=skipped, ios_threshold=ios_threshold,
                          prob_threshold=prob_threshold)


def sundries_suppression_loss(probs: torch.Tensor, masks: torch.Tensor,
                              report: SundriesReport,
                              eps: float = MASK_LOG_EPS) -> torch.Tensor:
    """Push detected sundries toward "no entity" and empty masks.

    For each detected entity the loss adds an area-weighted negative
    log-probability of the background class plus the mean over all pixels of
    -log(1 - mask).  Mask values are clamped to [eps, 1 - eps] before the log;
    the detection bookkeeping (indices, area weights) is treated as constant,
    so gradients reach only probs and masks.
    """
    h, w = masks.shape[-2:]
    total = probs.new_zeros(())
    for i in report.indices:
        p0 = probs[i, 0].clamp_min(eps)
        m = masks[i].clamp(eps, 1 - eps)
        total = total - float(report.alpha[i]) * torch.log(p0)
        total = total - torch.log1p(-m).sum() / (h * w)
    return total


def feature_coherence_loss(features: torch.Tensor, masks: torch.Tensor,
                           m_in: torch.Tensor,
                           min_out_px: int = MIN_OUT_REGION_PX):
    """Pull in-mask pixel embeddings toward their entity's visible center.

    features is (C, H, W); masks is (n, H, W) and is binarized at 0.5 for
    region bookkeeping only.  For each entity with at least `min_out_px`
    pixels outside the erasure mask and at least one pixel inside it, the
    center is the mean embedding over the outside region (treated as a
    constant) and the loss subtracts the cosine similarity of every in-mask
    pixel embedding to it.  Returns (loss, eligible_indices); with no eligible
    entity the loss is zero and the list is empty.
    """
    if features.ndim != 3:
        raise ValueError(f"features must be (C, H, W), got {tuple(features.shape)}")
    if masks.ndim != 3 or masks.shape[-2:] != features.shape[-2:]:
        raise ValueError("masks must be (n, H, W) on the feature grid")
    inside = _binarize(torch.as_tensor(m_in))
    loss = features.new_zeros(())
    eligible: list[int] = []
    for i in range(masks.shape[0]):
        hard = _binarize(masks[i].detach())
        r_out = hard & ~inside
        r_in = hard & inside
        if int(r_out.sum()) < min_out_px or int(r_in.sum()) < 1:
            continue
        center = features[:, r_out].mean(dim=1).detach()
        pix = features[:, r_in]
        cos = F.cosine_similarity(pix, center[:, None], dim=0, eps=1e-8)
        loss = loss - cos.sum()
        eligible.append(i)
    return loss, eligible


# --------------------------------------------------------------------------
# distillation-side losses


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, feature_fn) -> torch.Tensor:
    """Pixel MSE plus MSE between channel-normalized feature maps."""
    d = F.mse_loss(a, b)
    for fa, fb in zip(feature_fn(a), feature_fn(b)):
        d = d + F.mse_loss(F.normalize(fa, dim=1), F.normalize(fb, dim=1))
    return d


def distillation_loss(student_out: torch.Tensor, teacher_out: torch.Tensor,
                      metric: str = "l2", feature_fn=None) -> torch.Tensor:
    """Distance between the student's one-shot prediction and the ODE target."""
    if student_out.shape != teacher_out.shape:
        raise ValueError("student and teacher outputs must have equal shapes")
    if metric == "l2":
        return F.mse_loss(student_out, teacher_out)
    if metric == "perceptual":
        if feature_fn is None:
            raise ValueError("perceptual metric needs feature_fn")
        return perceptual_distance(student_out, teacher_out, feature_fn)
    raise ValueError(f"unknown metric {metric!r}")


def distribution_matching_grad(y: torch.Tensor, t, cond, real_model, fake_model,
                               noise: torch.Tensor,
                               schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Per-pixel generator gradient -(s_real - s_fake) at a noised sample.

    y is noised to time t; both frozen score models evaluate it and their
    score difference (scores are -eps_hat / sigma_t) is normalized by its own
    per-sample mean absolute value (plus 1e-6).  The result carries no graph;
    inject it with distribution_matching_loss.  When both models agree exactly
    the gradient is exactly zero.
    """
    if y.ndim < 2:
        raise ValueError("y must have a batch dim plus at least one data dim")
    schedule = schedule or getattr(real_model, "schedule", None)
    if schedule is None:
        raise ValueError("distribution_matching_grad needs a schedule")
    with torch.no_grad():
        y_t = schedule.add_noise(y.detach(), t, noise)
        ab = schedule._gather(t, y_t)
        sigma = (1 - ab).sqrt()
        s_real = -real_model.predict_eps(y_t, t, cond) / sigma
        s_fake = -fake_model.predict_eps(y_t, t, cond) / sigma
        raw = -(s_real - s_fake)
        dims = tuple(range(1, raw.ndim))
        norm = raw.abs().mean(dim=dims, keepdim=True) + 1e-6
        return raw / norm


def distribution_matching_loss(y: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Pseudo-loss whose gradient at y is grad / numel (mean-reduced MSE trick)."""
    return 0.5 * F.mse_loss(y, (y - grad).detach())


class FeatureDiscriminator(nn.Module):
    """Least-squares GAN head over the frozen teacher's mid-network features.

    The teacher is held by reference (not registered), so only the head's
    parameters belong to the discriminator's optimizer.  Inputs are noised to
    the given time before feature extraction; gradients flow through the
    frozen teacher into the images.
    """

    def __init__(self, teacher, width: int = 64):
        super().__init__()
        self._teacher = (teacher,)
        feat_ch = 4 * teacher.base_width
        self.head = nn.Sequential(
            nn.Conv2d(feat_ch, width, 3, stride=2, padding=1),
            nn.GroupNorm(8, width), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.GroupNorm(8, width), nn.SiLU(),
        )
        self.out = nn.Linear(width, 1)

    @property
    def teacher(self):
        return self._teacher[0]

    def forward(self, images: torch.Tensor, t, cond, noise: torch.Tensor) -> torch.Tensor:
        x_t = self.teacher.schedule.add_noise(images, t, noise)
        feats = self.teacher.encode_mid(x_t, t, cond)
        h = self.head(feats).mean(dim=(2, 3))
        return self.out(h).squeeze(-1)


def lsgan_losses(disc, real: torch.Tensor, fake: torch.Tensor, t, cond,
                 noise: torch.Tensor):
    """Least-squares GAN pair (L_G, L_D) with real label 1 and fake label 0.

    L_G = E[(D(fake) - 1)^2] keeps the generator in its graph; L_D uses a
    detached fake, so generator parameters receive gradient only through L_G.
    The same noise realization is used for the real and fake branches.  The
    caller must clear discriminator gradients before stepping it, since L_G's
    graph also touches the discriminator's parameters.
    """
    d_fake_attached = disc(fake, t, cond, noise)
    loss_g = (d_fake_attached - 1).pow(2).mean()
    d_real = disc(real, t, cond, noise)
    d_fake = disc(fake.detach(), t, cond, noise)
    loss_d = (d_real - 1).pow(2).mean() + d_fake.pow(2).mean()
    return loss_g, loss_d


# --------------------------------------------------------------------------
# loss combination


def adaptive_loss_weight(loss_main: torch.Tensor, loss_aux: torch.Tensor,
                         params, floor: float = 1e-6,
                         ceiling: float = 1e4) -> float:
    """Gradient-norm ratio ||grad main|| / (||grad aux|| + floor) on `params`.

    Returned as a detached float clamped to [0, ceiling].  A zero main
    gradient yields 0 (the auxiliary term is skipped); a zero auxiliary
    gradient saturates at the ceiling.
    """
    if isinstance(params, torch.Tensor):
        params = [params]
    params = list(params)

    def grad_norm(loss):
        if not (torch.is_tensor(loss) and loss.requires_grad):
            return 0.0
        grads = torch.autograd.grad(loss, params, retain_graph=True,
                                    allow_unused=True)
        total = 0.0
        for g in grads:
            if g is not None:
                total += float(g.detach().pow(2).sum())
        return total ** 0.5

    n_main = grad_norm(loss_main)
    if n_main == 0.0:
        return 0.0
    w = n_main / (grad_norm(loss_aux) + floor)
    return float(min(max(w, 0.0), ceiling))


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined objective."""

    distill: float = 1.0
    dmd: float = 0.7
    gan: float = 0.3
    ss: float = 0.5
    efc: float = 0.5


def combined_loss(parts: dict, weights: LossWeights | None = None,
                  ss_weight: float = 1.0, efc_weight: float = 1.0):
    """Weighted sum of the available loss parts.

    parts maps any of {"distill", "dmd", "gan", "ss", "efc"} to scalars;
    missing parts contribute nothing.  The pair-free terms are scaled by
    their adaptive weights first, then by their fixed coefficients.
    """
    weights = weights or LossWeights()
    known = {"distill", "dmd", "gan", "ss", "efc"}
    unknown = set(parts) - known
    if unknown:
        raise ValueError(f"unknown loss parts: {sorted(unknown)}")
    total = 0.0
    for name, coeff in (("distill", weights.distill), ("dmd", weights.dmd),
                        ("gan", weights.gan)):
        if name in parts:
            total = total + coeff * parts[name]
    if "ss" in parts:
        total = total + weights.ss * ss_weight * parts["ss"]
    if "efc" in parts:
        total = total + weights.efc * efc_weight * parts["efc"]
    return total
