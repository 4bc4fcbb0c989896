"""Semi-supervised lesion segmentation by progressive pseudo-labeling.

Unlabeled samples enter the training set in batches ordered by their
latent proximity to the current training set, and a bottleneck
consistency term ties together the latent codes of patches whose labels
agree.
"""
from ._accel import backend_name, numba_enabled, use_numba
from .config import RunConfig, load_config
from .data import DatasetPool, Mask, PatchSpec, Provenance, Sample, Volume, promote
from .errors import ConfigError, DataError, FormatError, PopcornError, ShapeError
from .losses import consistency_loss, dice_loss, feature_distance, similarity, total_loss
from .model import ModelConfig, UNet, init_model, predict_mask
from .selection import ProximityGraph, SelectionResult, build_graph, proximity_score, random_select, select
from .stats import ImageMetrics, image_metrics, wilcoxon_signed_rank
from .synth import SynthConfig, synthesize_dataset
from .trainer import CycleLog, Strategy, Trainer, TrainerConfig, run

__version__ = "0.1.0"
