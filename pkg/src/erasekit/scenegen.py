"""Procedural scene generation and erasure training samples.

Scenes are small square images with a synthetic background and a handful of
flat-colored shapes ("entities") drawn painter-style, so later shapes occlude
earlier ones.  Two kinds of training samples are derived from a scene:

* paired samples: random stroke/box masks placed over background, with the
  original image as ground truth (the masked content is almost entirely
  background, so reconstruction is supervised);
* unpaired samples: the dilated mask of one entity, with no ground truth for
  the erased region.

Everything is a pure function of (seed, config); no global RNG state is used.
"""

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

SHAPE_KINDS = ("rect", "ellipse", "triangle", "stripe")
BACKGROUND_KINDS = ("flat", "gradient", "texture")

# Resampling budgets.  Scene layout retries are internal and generous; the
# paired-mask budget is part of the documented contract.
_SCENE_ATTEMPTS = 64
_MASK_ATTEMPTS = 100
_MIN_VISIBLE_PX = 4


class DatasetError(Exception):
    """Raised when sample generation or dataset I/O cannot satisfy its contract."""


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the procedural scene distribution.

    Attributes:
        size: image height and width in pixels; square images only.  The
            downstream denoiser downsamples twice, so the size must be
            divisible by 8; supported sizes are 32 and 64.
        min_entities / max_entities: inclusive range for the number of shapes.
        min_extent / max_extent: bounding-box side range for a shape, pixels.
        max_coverage: cap on the fraction of pixels covered by entities.
        shapes: shape vocabulary drawn from uniformly.
        backgrounds: background style vocabulary drawn from uniformly.
        sensor_noise: std of Gaussian pixel noise added to the final image.
    """

    size: int = 32
    min_entities: int = 1
    max_entities: int = 6
    min_extent: int = 6
    max_extent: int = 14
    max_coverage: float = 0.6
    shapes: tuple[str, ...] = SHAPE_KINDS
    backgrounds: tuple[str, ...] = BACKGROUND_KINDS
    sensor_noise: float = 0.008

    def __post_init__(self):
        if self.size % 8 != 0:
            raise ValueError(f"image size must be divisible by 8, got {self.size}")
        if self.size not in (32, 64):
            raise ValueError(f"supported image sizes are 32 and 64, got {self.size}")
        if not (0 <= self.min_entities <= self.max_entities):
            raise ValueError("entity count range must satisfy 0 <= min <= max")
        if self.max_entities > 8:
            raise ValueError("at most 8 entities per scene are supported")
        if not (2 <= self.min_extent <= self.max_extent <= self.size):
            raise ValueError("invalid shape extent range")
        unknown = set(self.shapes) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds: {sorted(unknown)}")
        unknown = set(self.backgrounds) - set(BACKGROUND_KINDS)
        if unknown:
            raise ValueError(f"unknown background kinds: {sorted(unknown)}")


@dataclass
class Scene:
    """A rendered scene with occlusion-resolved entity masks.

    image is float32 (H, W, 3) in [0, 1].  entity_masks is uint8 (k, H, W)
    holding the visible pixels of each entity; masks are pairwise disjoint and
    each has at least one pixel.  background_mask is the complement of their
    union.
    """

    image: np.ndarray
    entity_masks: np.ndarray
    background_mask: np.ndarray
    seed: int


@dataclass
class PairedSample:
    """Masked input X, ground-truth image Y and binary mask M (all per-pixel).

    X equals (1 - M) * Y exactly; M covers at most 10% entity pixels relative
    to its own area, so the supervised region is essentially background.
    """

    x: np.ndarray  # (H, W, 3) float32
    y: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray  # (H, W) uint8
    seed: int


@dataclass
class UnpairedSample:
    """Masked input X and the dilated mask of the entity to erase.

    No ground truth exists for the masked region; the sample records which
    entity of the source scene was targeted.
    """

    x: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray  # (H, W) uint8
    entity_index: int
    seed: int


# --------------------------------------------------------------------------
# scene specification (drawn once, rasterized possibly several times)


@dataclass
class _ShapeSpec:
    kind: str
    params: dict
    color: np.ndarray  # (3,) float32
    shade_dir: float
    shade_amp: float


@dataclass
class _SceneSpec:
    size: int
    background: dict
    shapes: list
    noise: np.ndarray  # (H, W, 3) float32, pre-drawn sensor noise


def _muted_color(rng):
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.05, 0.35)
    v = rng.uniform(0.25, 0.8)
    return np.asarray(colorsys.hsv_to_rgb(h, s, v), dtype=np.float32)


def _entity_color(rng, used_hues):
    # Re-draw a few times for hue separation between entities; saturated
    # colors keep entities distinct from the muted backgrounds.
    for _ in range(8):
        h = rng.uniform(0.0, 1.0)
        if all(min(abs(h - u), 1 - abs(h - u)) > 0.07 for u in used_hues):
            break
    s = rng.uniform(0.55, 0.95)
    v = rng.uniform(0.65, 1.0)
    used_hues.append(h)
    return np.asarray(colorsys.hsv_to_rgb(h, s, v), dtype=np.float32)


def _draw_shape_params(rng, kind, size, extent):
    cy = rng.uniform(2.0, size - 3.0)
    cx = rng.uniform(2.0, size - 3.0)
    if kind == "rect":
        return {"cy": cy, "cx": cx,
                "hy": extent / 2 * rng.uniform(0.5, 1.0),
                "hx": extent / 2 * rng.uniform(0.5, 1.0)}
    if kind == "ellipse":
        return {"cy": cy, "cx": cx,
                "ry": max(1.2, extent / 2 * rng.uniform(0.5, 1.0)),
                "rx": max(1.2, extent / 2 * rng.uniform(0.5, 1.0))}
    if kind == "triangle":
        for _ in range(20):
            pts = rng.uniform(-extent / 2, extent / 2, size=(3, 2))
            area = 0.5 * abs(
                (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
                - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1]))
            if area >= 0.2 * extent * extent:
                break
        return {"cy": cy, "cx": cx, "pts": pts}
    if kind == "stripe":
        return {"cy": cy, "cx": cx,
                "angle": rng.uniform(0, math.pi),
                "half_len": extent * rng.uniform(0.45, 0.8),
                "half_width": rng.uniform(0.8, 2.0)}
    raise ValueError(f"unknown shape kind {kind!r}")


def _shape_mask(spec: _ShapeSpec, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    p = spec.params
    dy, dx = yy - p["cy"], xx - p["cx"]
    if spec.kind == "rect":
        return (np.abs(dy) <= p["hy"]) & (np.abs(dx) <= p["hx"])
    if spec.kind == "ellipse":
        return (dy / p["ry"]) ** 2 + (dx / p["rx"]) ** 2 <= 1.0
    if spec.kind == "triangle":
        pts = p["pts"]

        def half_plane(a, b):
            return (b[0] - a[0]) * (dx - a[1]) - (b[1] - a[1]) * (dy - a[0])

        d0 = half_plane(pts[0], pts[1])
        d1 = half_plane(pts[1], pts[2])
        d2 = half_plane(pts[2], pts[0])
        neg = (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
        pos = (d0 >= 0) & (d1 >= 0) & (d2 >= 0)
        return neg | pos
    if spec.kind == "stripe":
        c, s = math.cos(p["angle"]), math.sin(p["angle"])
        along = dx * c + dy * s
        across = -dx * s + dy * c
        return (np.abs(along) <= p["half_len"]) & (np.abs(across) <= p["half_width"])
    raise ValueError(f"unknown shape kind {spec.kind!r}")


def _render_background(bg: dict, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    kind = bg["kind"]
    if kind == "flat":
        img = np.broadcast_to(bg["color"], (size, size, 3)).copy()
    elif kind == "gradient":
        c, s = math.cos(bg["angle"]), math.sin(bg["angle"])
        t = (xx * c + yy * s)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = bg["color"][None, None] * (1 - t[..., None]) + bg["color2"][None, None] * t[..., None]
    elif kind == "texture":
        c, s = math.cos(bg["angle"]), math.sin(bg["angle"])
        phase = 2 * math.pi * (xx * c + yy * s) * (size / bg["period"])
        wave = np.sin(phase + bg["phase"])[..., None].astype(np.float32)
        img = bg["color"][None, None] + bg["amp"] * wave
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _scene_spec(rng, config: SceneConfig) -> _SceneSpec:
    size = config.size
    kind = config.backgrounds[rng.integers(len(config.backgrounds))]
    bg = {"kind": kind, "color": _muted_color(rng)}
    if kind == "gradient":
        bg["color2"] = _muted_color(rng)
        bg["angle"] = rng.uniform(0, 2 * math.pi)
    elif kind == "texture":
        bg["angle"] = rng.uniform(0, math.pi)
        bg["period"] = rng.uniform(2.5, 6.0)
        bg["phase"] = rng.uniform(0, 2 * math.pi)
        bg["amp"] = rng.uniform(0.04, 0.10)

    n = int(rng.integers(config.min_entities, config.max_entities + 1))
    used_hues: list[float] = []
    shapes = []
    for _ in range(n):
        kind = config.shapes[rng.integers(len(config.shapes))]
        extent = rng.uniform(config.min_extent, config.max_extent)
        shapes.append(_ShapeSpec(
            kind=kind,
            params=_draw_shape_params(rng, kind, size, extent),
            color=_entity_color(rng, used_hues),
            shade_dir=rng.uniform(0, 2 * math.pi),
            shade_amp=rng.uniform(0.0, 0.15),
        ))
    noise = rng.normal(0.0, config.sensor_noise, size=(size, size, 3)).astype(np.float32)
    return _SceneSpec(size=size, background=bg, shapes=shapes, noise=noise)


def _rasterize(spec: _SceneSpec, seed: int, omit: int | None = None) -> Scene:
    size = spec.size
    image = _render_background(spec.background, size)
    full_masks = []
    kept = [i for i in range(len(spec.shapes)) if i != omit]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    for i in kept:
        shape = spec.shapes[i]
        mask = _shape_mask(shape, size)
        proj = xx * math.cos(shape.shade_dir) + yy * math.sin(shape.shade_dir)
        shading = 1.0 + shape.shade_amp * (2 * proj - 1.0)
        fill = shape.color[None, None] * shading[..., None]
        image = np.where(mask[..., None], fill, image)
        full_masks.append(mask)

    visible = []
    for j, mask in enumerate(full_masks):
        occluders = full_masks[j + 1:]
        vis = mask.copy()
        for occ in occluders:
            vis &= ~occ
        visible.append(vis)

    image = np.clip(image + spec.noise, 0.0, 1.0).astype(np.float32)
    if visible:
        entity_masks = np.stack(visible).astype(np.uint8)
    else:
        entity_masks = np.zeros((0, size, size), dtype=np.uint8)
    background = (entity_masks.sum(axis=0) == 0).astype(np.uint8)
    return Scene(image=image, entity_masks=entity_masks,
                 background_mask=background, seed=seed)


def _scene_ok(scene: Scene, config: SceneConfig, expected_entities: int) -> bool:
    if scene.entity_masks.shape[0] != expected_entities:
        return False
    if expected_entities and scene.entity_masks.reshape(expected_entities, -1).sum(axis=1).min() < _MIN_VISIBLE_PX:
        return False
    covered = (scene.background_mask == 0).sum()
    return covered <= config.max_coverage * config.size * config.size


def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    """Render a scene deterministically from a seed.

    Layouts where some entity ends up almost fully occluded, or where entities
    cover too much of the image, are rejected and redrawn from the same RNG
    stream, so the function stays a pure function of (seed, config).
    """
    config = config or SceneConfig()
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE9E, seed]))
    for _ in range(_SCENE_ATTEMPTS):
        spec = _scene_spec(rng, config)
        scene = _rasterize(spec, seed)
        if _scene_ok(scene, config, len(spec.shapes)):
            return scene
    raise DatasetError(f"could not draw a valid scene for seed {seed}")


def _valid_spec(seed: int, config: SceneConfig) -> _SceneSpec:
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE9E, seed]))
    for _ in range(_SCENE_ATTEMPTS):
        spec = _scene_spec(rng, config)
        scene = _rasterize(spec, seed)
        if _scene_ok(scene, config, len(spec.shapes)):
            return spec
    raise DatasetError(f"could not draw a valid scene for seed {seed}")


def scene_without_entity(seed: int, config: SceneConfig, entity_index: int) -> Scene:
    """Re-render the scene of `seed` with one entity left out.

    Used by evaluation harnesses that need ground-truth erased images; pixels
    the entity covered show whatever lies beneath it (background or occluded
    entities).  Sensor noise and all other content are reproduced exactly.
    """
    spec = _valid_spec(seed, config)
    if not (0 <= entity_index < len(spec.shapes)):
        raise IndexError(f"entity index {entity_index} out of range for scene with "
                         f"{len(spec.shapes)} entities")
    return _rasterize(spec, seed, omit=entity_index)


def entity_occludes_nothing(seed: int, config: SceneConfig, entity_index: int) -> bool:
    """True if removing the entity leaves every other visible mask unchanged."""
    base = generate_scene(seed, config)
    if not (0 <= entity_index < base.entity_masks.shape[0]):
        raise IndexError(f"entity index {entity_index} out of range")
    reduced = scene_without_entity(seed, config, entity_index)
    others = np.delete(base.entity_masks, entity_index, axis=0)
    return bool(np.array_equal(others, reduced.entity_masks))


# --------------------------------------------------------------------------
# paired samples (stroke/box masks over background)


def _stroke_mask(rng, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    n_seg = int(rng.integers(2, 6))
    y = rng.uniform(2.0, size - 3.0)
    x = rng.uniform(2.0, size - 3.0)
    angle = rng.uniform(0, 2 * math.pi)
    pts = [(y, x)]
    for _ in range(n_seg):
        angle += rng.uniform(-0.9, 0.9)
        step = rng.uniform(3.0, 9.0)
        y = float(np.clip(y + step * math.sin(angle), 0, size - 1))
        x = float(np.clip(x + step * math.cos(angle), 0, size - 1))
        pts.append((y, x))
    for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
        n = int(2 * max(abs(y1 - y0), abs(x1 - x0))) + 2
        ys = np.linspace(y0, y1, n)
        xs = np.linspace(x0, x1, n)
        mask[np.round(ys).astype(int), np.round(xs).astype(int)] = True
    width = int(rng.integers(2, 9))
    return ndimage.binary_dilation(mask, structure=np.ones((width, width), dtype=bool))


def _box_mask(rng, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    bh = int(rng.integers(3, 11))
    bw = int(rng.integers(3, 11))
    y0 = int(rng.integers(0, size - bh + 1))
    x0 = int(rng.integers(0, size - bw + 1))
    mask[y0:y0 + bh, x0:x0 + bw] = True
    return mask


def make_paired(scene: Scene, seed: int,
                min_area: float = 0.02, max_area: float = 0.30,
                max_entity_overlap: float = 0.10) -> PairedSample:
    """Draw a background stroke/box mask over the scene and pair it with the image.

    Masks are resampled until their area lies in [min_area, max_area] of the
    image and at most `max_entity_overlap` of the mask falls on entity pixels;
    after 100 failed attempts a DatasetError is raised.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xD1A5, scene.seed, seed]))
    size = scene.image.shape[0]
    entity_union = scene.background_mask == 0
    for _ in range(_MASK_ATTEMPTS):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 5))):
            if rng.uniform() < 0.5:
                mask |= _stroke_mask(rng, size)
            else:
                mask |= _box_mask(rng, size)
        area = int(mask.sum())
        if not (min_area * size * size <= area <= max_area * size * size):
            continue
        if int((mask & entity_union).sum()) > max_entity_overlap * area:
            continue
        m = mask.astype(np.uint8)
        x = scene.image * (1.0 - m[..., None].astype(np.float32))
        return PairedSample(x=x, y=scene.image.copy(), mask=m, seed=seed)
    raise DatasetError(
        f"no valid background mask for scene seed {scene.seed} after {_MASK_ATTEMPTS} attempts")


def make_unpaired(scene: Scene, entity_index: int, dilate_px: int = 1) -> UnpairedSample:
    """Build an erasure input by masking out one entity (mask dilated a little).

    Dilation uses a 3x3 structuring element applied `dilate_px` times, so the
    mask safely covers the entity's anti-aliased rim; dilate_px=0 keeps the
    raw mask.
    """
    k = scene.entity_masks.shape[0]
    if not (0 <= entity_index < k):
        raise IndexError(f"entity index {entity_index} out of range for {k} entities")
    if dilate_px < 0:
        raise ValueError("dilate_px must be >= 0")
    mask = scene.entity_masks[entity_index].astype(bool)
    if dilate_px > 0:
        mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool),
                                       iterations=dilate_px)
    m = mask.astype(np.uint8)
    x = scene.image * (1.0 - m[..., None].astype(np.float32))
    return UnpairedSample(x=x, mask=m, entity_index=entity_index, seed=scene.seed)


# --------------------------------------------------------------------------
# corpus builders


def build_paired_corpus(config: SceneConfig, seed: int, count: int,
                        min_area: float = 0.02, max_area: float = 0.30,
                        max_entity_overlap: float = 0.10) -> list:
    """Generate `count` paired samples, one per fresh scene.

    Scene seeds come from a salted stream of (corpus seed); scenes whose mask
    synthesis fails are skipped and replaced, so the corpus always reaches the
    requested size.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    stream = np.random.SeedSequence([0xD1D1, seed]).generate_state(max(4 * count, 16))
    samples = []
    for raw in stream:
        if len(samples) == count:
            break
        scene_seed = int(raw)
        try:
            scene = generate_scene(scene_seed, config)
            samples.append(make_paired(scene, seed, min_area, max_area,
                                       max_entity_overlap))
        except DatasetError:
            continue
    if len(samples) < count:
        raise DatasetError(f"only {len(samples)}/{count} paired samples possible "
                           "under this scene configuration")
    return samples


def build_unpaired_corpus(config: SceneConfig, seed: int, count: int,
                          dilate_px: int = 1) -> list:
    """Generate `count` unpaired erasure inputs, one random entity per scene."""
    if count < 0:
        raise ValueError("count must be >= 0")
    ss = np.random.SeedSequence([0xD2D2, seed])
    rng = np.random.default_rng(ss)
    stream = ss.generate_state(max(4 * count, 16))
    samples = []
    for raw in stream:
        if len(samples) == count:
            break
        try:
            scene = generate_scene(int(raw), config)
        except DatasetError:
            continue
        k = scene.entity_masks.shape[0]
        if k == 0:
            continue
        samples.append(make_unpaired(scene, int(rng.integers(0, k)), dilate_px))
    if len(samples) < count:
        raise DatasetError(f"only {len(samples)}/{count} unpaired samples possible "
                           "under this scene configuration")
    return samples
