"""Prototype-refinement semi-supervised training on precomputed features."""

from .contrastive import AugmentationPolicy, ContrastiveBatch, augment, augment_batch, contrastive_loss
from .data import (FeatureSample, SplitDataset, SynthConfig, generate_synthetic, load_dataset,
                   save_dataset, standardize)
from .model import ModelParams, OptimizerState, init_params, load_checkpoint, save_checkpoint
from .pipeline import (TrainConfig, agreement_rates, beta_schedule, evaluate, multi_seed,
                       total_loss, train, train_baseline, train_ipr)
from .prototypes import (PrototypeBank, gated_update, init_prototypes, pairwise_similarity,
                         pseudo_label, soft_label)

__version__ = "0.1.0"
