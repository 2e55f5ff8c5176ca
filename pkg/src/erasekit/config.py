"""Experiment configuration: one bundle of per-module settings.

Configs load from INI files (any subset of sections/keys overrides the
preset defaults), hash to a stable identifier that datasets and checkpoints
embed, and round-trip back to INI text.
"""

import configparser
import dataclasses
import hashlib
from pathlib import Path

from .losses import LossWeights
from .scenegen import SceneConfig
from .segmentor import SegmentorConfig, SegTrainConfig
from .training import StageConfig


@dataclasses.dataclass(frozen=True)
class ScheduleSettings:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclasses.dataclass(frozen=True)
class ModelSettings:
    base_width: int = 32
    time_dim: int = 128


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Dataset sizes and mask-synthesis parameters."""

    d1_train: int = 2000
    d1_val: int = 64
    d2_train: int = 1000
    dilate_px: int = 1
    mask_min_area: float = 0.02
    mask_max_area: float = 0.30
    max_entity_overlap: float = 0.10

    def __post_init__(self):
        if min(self.d1_train, self.d2_train) < 1 or self.d1_val < 0:
            raise ValueError("bad dataset sizes")
        if not (0 < self.mask_min_area <= self.mask_max_area < 1):
            raise ValueError("bad mask area bounds")


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    """Inference and metric settings."""

    eval_scenes: int = 128
    num_steps: int = 2
    mid_timestep: int = 499
    composite: bool = True
    ios_threshold: float = 0.9
    prob_threshold: float = 0.2

    def __post_init__(self):
        if self.eval_scenes < 1 or self.num_steps not in (1, 2):
            raise ValueError("bad eval settings")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = SceneConfig()
    schedule: ScheduleSettings = ScheduleSettings()
    model: ModelSettings = ModelSettings()
    segmentor: SegmentorConfig = SegmentorConfig()
    seg_train: SegTrainConfig = SegTrainConfig()
    data: DataConfig = DataConfig()
    stage1: StageConfig = StageConfig(stage=1, iterations=2000, batch_size=32,
                                      learning_rate=3e-4, save_every=500)
    stage2: StageConfig = StageConfig(stage=2, iterations=4000, batch_size=8,
                                      learning_rate=1e-4, disc_lr=2e-4,
                                      grad_clip=1.0, save_every=500)
    stage3: StageConfig = StageConfig(stage=3, iterations=2000, batch_size=8,
                                      learning_rate=5e-5, disc_lr=1e-4,
                                      grad_clip=1.0, save_every=250)
    eval: EvalConfig = EvalConfig()
    weights: LossWeights = LossWeights()


_SECTIONS = ("scene", "schedule", "model", "segmentor", "seg_train", "data",
             "stage1", "stage2", "stage3", "eval", "weights")


def default_config() -> ExperimentConfig:
    """Toy-scale defaults; trains the full pipeline in hours on one CPU."""
    return ExperimentConfig()


def small_config() -> ExperimentConfig:
    """Reduced scale for the acceptance ablation: smaller datasets and
    shorter stages, calibrated so the pair-free losses still separate from
    the baseline within the evaluation budget."""
    return ExperimentConfig(
        data=DataConfig(d1_train=800, d1_val=48, d2_train=400),
        stage1=StageConfig(stage=1, iterations=800, batch_size=16,
                           learning_rate=3e-4, save_every=300),
        stage2=StageConfig(stage=2, iterations=1200, batch_size=6,
                           learning_rate=1e-4, disc_lr=2e-4, grad_clip=1.0,
                           save_every=300),
        stage3=StageConfig(stage=3, iterations=800, batch_size=6,
                           learning_rate=5e-5, disc_lr=1e-4, grad_clip=1.0,
                           save_every=200),
        eval=EvalConfig(eval_scenes=48),
    )


_PRESETS = {"default": default_config, "small": small_config}


def preset(name: str) -> ExperimentConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; "
                         f"choose from {sorted(_PRESETS)}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _parse_value(default, text: str, where: str, nullable: bool = False):
    text = text.strip()
    if nullable and text.lower() == "none":
        return None
    if default is None:
        # nullable numeric field currently unset: parse as float
        return float(text)
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        elem = default[0] if default else ""
        return tuple(_parse_value(elem, s, where) for s in items)
    if isinstance(default, str):
        return text
    raise ValueError(f"{where}: unsupported field type {type(default).__name__}")


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse an INI override file on top of `base` (default preset if None).

    Unknown sections or keys raise ValueError rather than being ignored.
    """
    base = base or default_config()
    parser = configparser.ConfigParser()
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string(text, source=str(path))
    updates = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        current = getattr(base, section)
        known = {f.name: getattr(current, f.name)
                 for f in dataclasses.fields(current)}
        nullable = {f.name for f in dataclasses.fields(current)
                    if "None" in str(f.type)}
        overrides = {}
        for key, raw in parser.items(section):
            if key == "stage" and isinstance(current, StageConfig):
                raise ValueError("the stage number of a stage section is fixed")
            if key not in known:
                raise ValueError(f"unknown config key {section}.{key}")
            overrides[key] = _parse_value(known[key], raw, f"{section}.{key}",
                                          nullable=key in nullable)
        updates[section] = dataclasses.replace(current, **overrides)
    return dataclasses.replace(base, **updates)


def to_ini_text(config: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        value = getattr(config, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(value):
            if f.name == "stage" and isinstance(value, StageConfig):
                continue  # structural, rejected by load_config
            lines.append(f"{f.name} = {_format_value(getattr(value, f.name))}")
        lines.append("")
    return "\n".join(lines)


def canonical_text(config: ExperimentConfig,
                   sections: tuple = _SECTIONS) -> str:
    """Sorted section.key=value lines; the basis of the config hash."""
    unknown = set(sections) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    lines = []
    for section in sections:
        value = getattr(config, section)
        for f in dataclasses.fields(value):
            lines.append(f"{section}.{f.name}={_format_value(getattr(value, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(config: ExperimentConfig,
                sections: tuple = _SECTIONS) -> bytes:
    """Digest of the named sections (all of them by default).

    Cached artifacts key on the sections that feed them, so edits elsewhere
    in the config leave the artifact reusable.
    """
    return hashlib.sha256(canonical_text(config, sections).encode("utf-8")).digest()
