"""Subject watermarking against subject-driven image synthesis.

A generator network produces imperceptible patterns that are added to a
subject's images; a detector learns to tell whether synthesized images came
from a model trained on watermarked or on clean copies of those images.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigurationError, DimensionError, GenmarkError, IngestionError,
                     InsufficientDataError, NumericalDegeneracyError, TrainingAborted, ValidationError)
from .evaluation import (EvalReport, ScenarioAssets, ScenarioSpec, SeedAudit, balanced_accuracy,
                         eval_forgery, eval_partial_watermarking, eval_quality, eval_removal, eval_scenario,
                         eval_uniqueness, forgery_attack, removal_attack)
from .finetune import FinetuneConfig, build_finetune_set, finetune_detector
from .imagery import (DatasetManifest, PromptSet, SubjectDataset, Task, default_prompts,
                      generate_synthetic_subjects, load_image_folder, split_prompts, synthetic_corpus)
from .metrics import FeatureExtractor, embed_features, frechet_distance, perceptual_distance
from .pretrain import PretrainConfig, TrainingLog
from .synthesis import (ModelKind, NoiseSchedule, ProxyConfig, SynthesisRun, denoise_loss, forward_diffuse,
                        ingest_external_synthesis, synthesize_run, train_synthesizer)
from .watermark import (DetectorModel, GeneratorModel, WatermarkPattern, apply_watermark, classify_probability,
                        detect, generate_watermark, sample_latent)

__all__ = [n for n in dir() if not n.startswith("_")]
