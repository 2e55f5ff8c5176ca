"""Few-step diffusion object erasure on procedural scenes, trained without
paired erasure data."""

from .config import (ExperimentConfig, config_hash, default_config,
                     load_config, preset, small_config)
from .diffusion import Condition, Denoiser, NoiseSchedule, ode_sample, student_sample
from .evaluation import (MetricsReport, build_eval_cases, erase_image,
                         evaluate, identity_eraser, make_student_eraser,
                         oracle_eraser, run_ablation)
from .losses import (LossWeights, adaptive_loss_weight, combined_loss,
                     detect_sundries, distribution_matching_grad,
                     feature_coherence_loss, intersection_over_self,
                     sundries_suppression_loss)
from .scenegen import (Scene, SceneConfig, generate_scene, make_paired,
                       make_unpaired, scene_without_entity)
from .segmentor import EntitySegmenter, SegmentorConfig, segment, train_segmentor
from .training import (ErasureModels, StageConfig, StageThreeFlags,
                       TrainingDiverged, load_denoiser, train_stage1,
                       train_stage2, train_stage3)

__version__ = "0.1.0"
