"""Unsupervised reference-guided image translation supervised by a contrastive discriminator."""

from .augment import AugmentationPolicy, PatchSpec, augment, sample_patches
from .config import EvalConfig, RunConfig, parse_config
from .contrastive import (ContrastiveConfig, NegativeDictionary, aggregate_patch_rep,
                          discriminator_contrastive_loss, info_nce, style_match_loss)
from .data import DatasetSpec, SyntheticStyleSpec, load_dataset, make_synthetic
from .evaluation import (evaluate_translation, frechet_distance, interpolate_styles,
                         similarity_search)
from .networks import (NetworkSpec, adain, build_discriminator, build_generator,
                       build_style_encoder, ema_update)
from .objectives import (LossWeights, adv_loss_d, adv_loss_g, cycle_loss, r1_penalty,
                         total_d_loss, total_ge_loss)
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"
