"""Query-based entity segmentation.

A small convolutional backbone produces a per-pixel embedding map; a fixed set
of learned queries cross-attends to pooled backbone tokens and emits, per
query, an entity-presence distribution and a soft mask obtained by taking dot
products of the query's mask embedding with the per-pixel embeddings.  The
model is trained on procedural scenes with bipartite matching, then frozen and
reused both as a differentiable critic (losses flow through it into generated
images) and as the evaluator behind the erasure metrics.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from .scenegen import Scene, SceneConfig, generate_scene

# Mask logits are clamped so sigmoid stays strictly inside (0, 1) in float32.
_MASK_LOGIT_LIMIT = 14.0


class SegmentorTrainingError(Exception):
    """Raised when segmentor training fails outright (NaN loss)."""


@dataclass(frozen=True)
class SegmentorConfig:
    n_queries: int = 12
    feat_dim: int = 32
    base_width: int = 24
    query_dim: int = 64
    decoder_layers: int = 2

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("need at least one query")
        if self.feat_dim < 2 or self.query_dim % 4:
            raise ValueError("feat_dim must be >= 2 and query_dim divisible by 4")


@dataclass
class SegPrediction:
    """Batched segmentation output.

    probs: (N, n, 2) rows summing to 1, columns (no entity, entity).
    masks: (N, n, H, W) soft masks strictly inside (0, 1).
    features: (N, C, H, W) per-pixel embeddings feeding the mask projection.
    class_logits / mask_logits are the pre-softmax / pre-sigmoid values kept
    for training losses.
    """

    probs: torch.Tensor
    masks: torch.Tensor
    features: torch.Tensor
    class_logits: torch.Tensor
    mask_logits: torch.Tensor

    def __len__(self) -> int:
        return self.probs.shape[0]


class _ConvBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(4, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class _DecoderLayer(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.ln_self = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, 4, batch_first=True)
        self.ln_cross = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, 4, batch_first=True)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(),
                                 nn.Linear(2 * dim, dim))

    def forward(self, queries, memory):
        q = self.ln_self(queries)
        queries = queries + self.self_attn(q, q, q, need_weights=False)[0]
        q = self.ln_cross(queries)
        queries = queries + self.cross_attn(q, memory, memory, need_weights=False)[0]
        return queries + self.ffn(self.ln_ffn(queries))


def _positional_features(h: int, w: int, dim: int, device, dtype) -> torch.Tensor:
    """Sinusoidal 2-D position features for the (h*w) backbone tokens."""
    half = dim // 2

    def encode(n, d):
        v = torch.linspace(0.0, 1.0, n, device=device, dtype=dtype)
        freqs = torch.exp(torch.linspace(0.0, math.log(32.0), d // 2,
                                         device=device, dtype=dtype))
        args = math.pi * v[:, None] * freqs[None]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)

    ey = encode(h, half)
    ex = encode(w, dim - half)
    grid = torch.cat([ey[:, None, :].expand(h, w, -1),
                      ex[None, :, :].expand(h, w, -1)], dim=-1)
    return grid.reshape(h * w, dim)


class EntitySegmenter(nn.Module):
    """Backbone + query decoder producing classes, masks and pixel embeddings."""

    def __init__(self, config: SegmentorConfig | None = None):
        super().__init__()
        self.config = config or SegmentorConfig()
        c = self.config
        b = c.base_width
        self.stem = nn.Conv2d(3, b, 3, padding=1)
        self.enc1 = _ConvBlock(b)
        self.down1 = nn.Conv2d(b, 2 * b, 3, stride=2, padding=1)
        self.enc2 = _ConvBlock(2 * b)
        self.down2 = nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1)
        self.enc3 = _ConvBlock(4 * b)
        self.up1 = nn.Conv2d(4 * b, 2 * b, 3, padding=1)
        self.fuse1 = nn.Conv2d(4 * b, 2 * b, 3, padding=1)
        self.up2 = nn.Conv2d(2 * b, b, 3, padding=1)
        self.fuse2 = nn.Conv2d(2 * b, b, 3, padding=1)
        self.feature_head = nn.Conv2d(b, c.feat_dim, 1)

        self.token_proj = nn.Linear(4 * b, c.query_dim)
        self.queries = nn.Embedding(c.n_queries, c.query_dim)
        self.decoder = nn.ModuleList(
            _DecoderLayer(c.query_dim) for _ in range(c.decoder_layers))
        self.class_head = nn.Linear(c.query_dim, 2)
        self.mask_head = nn.Sequential(
            nn.Linear(c.query_dim, c.query_dim), nn.GELU(),
            nn.Linear(c.query_dim, c.feat_dim))

    def forward(self, images: torch.Tensor) -> SegPrediction:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"images must be (N, 3, H, W), got {tuple(images.shape)}")
        x = images * 2.0 - 1.0
        h1 = self.enc1(self.stem(x))
        h2 = self.enc2(self.down1(h1))
        h3 = self.enc3(self.down2(h2))

        u = F.interpolate(h3, scale_factor=2, mode="nearest")
        u = self.fuse1(torch.cat([self.up1(u), h2], dim=1))
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.fuse2(torch.cat([self.up2(u), h1], dim=1))
        features = self.feature_head(F.silu(u))

        n, _, th, tw = h3.shape
        tokens = h3.flatten(2).transpose(1, 2)
        tokens = self.token_proj(tokens)
        tokens = tokens + _positional_features(th, tw, tokens.shape[-1],
                                               tokens.device, tokens.dtype)[None]
        q = self.queries.weight[None].expand(n, -1, -1)
        for layer in self.decoder:
            q = layer(q, tokens)

        class_logits = self.class_head(q)
        probs = F.softmax(class_logits, dim=-1)
        embed = self.mask_head(q)
        mask_logits = torch.einsum("nqc,nchw->nqhw", embed, features)
        mask_logits = mask_logits / math.sqrt(self.config.feat_dim)
        mask_logits = mask_logits.clamp(-_MASK_LOGIT_LIMIT, _MASK_LOGIT_LIMIT)
        masks = torch.sigmoid(mask_logits)
        return SegPrediction(probs=probs, masks=masks, features=features,
                             class_logits=class_logits, mask_logits=mask_logits)

    def perceptual_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Two backbone stages used as a feature-space distance; differentiable."""
        x = images * 2.0 - 1.0
        h1 = self.enc1(self.stem(x))
        h2 = self.enc2(self.down1(h1))
        h3 = self.enc3(self.down2(h2))
        return [h2, h3]


def segment(model: EntitySegmenter, image) -> SegPrediction:
    """Run the segmentor on a numpy (H, W, 3) image or an NCHW tensor batch.

    Gradients flow through to the input when it is a tensor that requires
    grad; numpy inputs are converted (and batched) first.
    """
    if isinstance(image, np.ndarray):
        if image.ndim == 3:
            image = image[None]
        tensor = torch.from_numpy(np.ascontiguousarray(image)).float().permute(0, 3, 1, 2)
    else:
        tensor = image
        if tensor.ndim == 3:
            tensor = tensor[None]
    return model(tensor)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SegTrainConfig:
    """Bipartite-matching training of the segmentor on procedural scenes."""

    iterations: int = 8000
    batch_size: int = 8
    learning_rate: float = 1e-3
    final_lr_scale: float = 0.05
    weight_decay: float = 1e-4
    num_scenes: int = 5000
    val_scenes: int = 300
    blank_fraction: float = 0.05
    noobj_weight: float = 0.4
    recall_target: float = 0.9
    iou_threshold: float = 0.7
    prob_threshold: float = 0.5

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("bad iteration/batch settings")
        if not (0 < self.final_lr_scale <= 1):
            raise ValueError("final_lr_scale must lie in (0, 1]")
        if not (0 <= self.blank_fraction < 1):
            raise ValueError("blank_fraction must lie in [0, 1)")


@dataclass
class SegValidationReport:
    recall: float
    mean_iou: float
    matched_entities: int
    total_entities: int
    false_positives_per_image: float
    max_blank_entity_prob: float
    n_scenes: int
    n_blank_scenes: int


@dataclass
class SegTrainResult:
    model: EntitySegmenter
    report: SegValidationReport
    converged: bool
    final_loss: float


def _scene_batch(scenes: list[Scene], device=None) -> torch.Tensor:
    arr = np.stack([s.image for s in scenes])
    return torch.from_numpy(arr).float().permute(0, 3, 1, 2)


def _match_cost(p1, soft_masks, gt):
    """(n, k) matching cost from entity prob, dice and BCE terms; no grad."""
    n, hw = soft_masks.shape
    eps = 1e-6
    m = soft_masks.clamp(eps, 1 - eps)
    inter = m @ gt.T
    dice = 1 - (2 * inter + 1) / (m.sum(1, keepdim=True) + gt.sum(1)[None] + 1)
    bce = (-(torch.log(m) @ gt.T) - torch.log(1 - m) @ (1 - gt).T) / hw
    return 2.0 * (-p1[:, None]) + 5.0 * dice + 2.0 * bce


def _dice_loss(soft_mask, gt):
    inter = (soft_mask * gt).sum()
    return 1 - (2 * inter + 1) / (soft_mask.sum() + gt.sum() + 1)


def match_entities(pred: SegPrediction, index: int, gt_masks: torch.Tensor):
    """Hungarian assignment of queries to ground-truth entities for one image.

    Returns (query_rows, entity_cols) index arrays; empty when the scene has
    no entities.
    """
    k = gt_masks.shape[0]
    if k == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    with torch.no_grad():
        p1 = pred.probs[index, :, 1]
        soft = pred.masks[index].flatten(1)
        cost = _match_cost(p1, soft, gt_masks.flatten(1))
    rows, cols = linear_sum_assignment(cost.cpu().numpy())
    return rows, cols


def _batch_loss(pred: SegPrediction, gt_list, noobj_weight: float):
    device = pred.probs.device
    class_weight = torch.tensor([noobj_weight, 1.0], device=device)
    total_cls = pred.probs.new_zeros(())
    total_mask = pred.probs.new_zeros(())
    n_matched = 0
    for i, gt in enumerate(gt_list):
        rows, cols = match_entities(pred, i, gt)
        targets = torch.zeros(pred.probs.shape[1], dtype=torch.long, device=device)
        targets[rows] = 1
        total_cls = total_cls + F.cross_entropy(pred.class_logits[i], targets,
                                                weight=class_weight)
        for r, c in zip(rows, cols):
            total_mask = total_mask + F.binary_cross_entropy_with_logits(
                pred.mask_logits[i, r], gt[c])
            total_mask = total_mask + _dice_loss(pred.masks[i, r], gt[c])
            n_matched += 1
    loss = total_cls / len(gt_list)
    if n_matched:
        loss = loss + total_mask / n_matched
    return loss


def validate_segmentor(model: EntitySegmenter, scenes: list[Scene],
                       iou_threshold: float = 0.7,
                       prob_threshold: float = 0.5,
                       batch_size: int = 32) -> SegValidationReport:
    """Entity recall / IoU / false-positive statistics on held-out scenes."""
    was_training = model.training
    model.eval()
    matched = 0
    total = 0
    iou_sum = 0.0
    false_pos = 0
    max_blank_p1 = 0.0
    n_blank = 0
    with torch.no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            pred = model(_scene_batch(chunk))
            for i, scene in enumerate(chunk):
                p1 = pred.probs[i, :, 1].numpy()
                hard = (pred.masks[i] > 0.5).numpy()
                active = [q for q in range(hard.shape[0]) if p1[q] > prob_threshold]
                k = scene.entity_masks.shape[0]
                if k == 0:
                    n_blank += 1
                    max_blank_p1 = max(max_blank_p1, float(p1.max()) if len(p1) else 0.0)
                    false_pos += len(active)
                    continue
                total += k
                gts = scene.entity_masks.astype(bool)
                pairs = []
                for q in active:
                    for j in range(k):
                        inter = np.logical_and(hard[q], gts[j]).sum()
                        union = np.logical_or(hard[q], gts[j]).sum()
                        iou = inter / union if union else 0.0
                        pairs.append((iou, q, j))
                pairs.sort(reverse=True)
                used_q, used_j = set(), set()
                image_matches = 0
                for iou, q, j in pairs:
                    if iou <= iou_threshold or q in used_q or j in used_j:
                        continue
                    used_q.add(q)
                    used_j.add(j)
                    matched += 1
                    image_matches += 1
                    iou_sum += iou
                false_pos += len(active) - image_matches
    if was_training:
        model.train()
    n_fg = len(scenes) - n_blank
    return SegValidationReport(
        recall=matched / total if total else 1.0,
        mean_iou=iou_sum / matched if matched else 0.0,
        matched_entities=matched,
        total_entities=total,
        false_positives_per_image=false_pos / len(scenes) if scenes else 0.0,
        max_blank_entity_prob=max_blank_p1,
        n_scenes=n_fg,
        n_blank_scenes=n_blank,
    )


def build_training_scenes(scene_config: SceneConfig, seed: int, count: int,
                          blank_fraction: float = 0.0) -> list[Scene]:
    """Deterministic scene list; a slice of them rendered without entities."""
    seeds = np.random.SeedSequence([0x5E6, seed]).generate_state(count)
    blank_config = None
    if blank_fraction > 0:
        blank_config = replace(scene_config, min_entities=0, max_entities=0)
    scenes = []
    for i, s in enumerate(seeds):
        if blank_config is not None and i % max(1, int(round(1 / blank_fraction))) == 0:
            scenes.append(generate_scene(int(s), blank_config))
        else:
            scenes.append(generate_scene(int(s), scene_config))
    return scenes


def train_segmentor(scene_config: SceneConfig, config: SegTrainConfig | None = None,
                    seed: int = 0, model_config: SegmentorConfig | None = None,
                    log=None) -> SegTrainResult:
    """Train the segmentor from scratch on procedural scenes.

    Deterministic for a fixed seed.  Validation runs on freshly drawn held-out
    scenes (plus blank backgrounds); the result flags non-convergence instead
    of raising, so callers can decide how strict to be.
    """
    config = config or SegTrainConfig()
    torch.manual_seed(seed)
    model = EntitySegmenter(model_config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    scenes = build_training_scenes(scene_config, seed, config.num_scenes,
                                   config.blank_fraction)

    final_loss = float("nan")
    for step in range(config.iterations):
        # cosine decay from learning_rate to final_lr_scale * learning_rate;
        # the flat phase alone leaves recall oscillating below target
        frac = step / max(1, config.iterations)
        scale = (config.final_lr_scale + (1 - config.final_lr_scale)
                 * 0.5 * (1 + math.cos(math.pi * frac)))
        for group in opt.param_groups:
            group["lr"] = config.learning_rate * scale
        rng = np.random.default_rng(np.random.SeedSequence([0x5E6E, seed, step]))
        idx = rng.integers(0, len(scenes), size=config.batch_size)
        batch = [scenes[int(i)] for i in idx]
        pred = model(_scene_batch(batch))
        gt_list = [torch.from_numpy(s.entity_masks.astype(np.float32)) for s in batch]
        loss = _batch_loss(pred, gt_list, config.noobj_weight)
        if not torch.isfinite(loss):
            raise SegmentorTrainingError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        final_loss = float(loss.detach())
        if log is not None and step % 50 == 0:
            log(step=step, loss=final_loss)

    val_seed = seed + 101
    val = build_training_scenes(scene_config, val_seed, config.val_scenes)
    blanks = build_training_scenes(
        replace(scene_config, min_entities=0, max_entities=0), val_seed + 1,
        max(10, config.val_scenes // 6))
    report = validate_segmentor(model, val + blanks, config.iou_threshold,
                                config.prob_threshold)
    model.eval()
    return SegTrainResult(
        model=model,
        report=report,
        converged=(report.recall >= config.recall_target
                   and report.max_blank_entity_prob < 0.5),
        final_loss=final_loss,
    )
