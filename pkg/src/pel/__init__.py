"""Parameter-efficient fine-tuning toolkit for long-tailed classification."""

from .backbone import (
    BackboneParams,
    ViTConfig,
    VIT_B16,
    count_backbone_params,
    extract_feature,
    load_backbone,
    save_backbone,
    set_trainable,
)
from .classifier import ClassifierParams, init_random, init_semantic, logits, weight_norms
from .data import LabeledDataset, SyntheticLTSpec, generate_synthetic_lt, load_dataset, save_dataset
from .errors import ArchiveError, ConfigError, NumericGuardError, ShapeError
from .losses import ClassPrior, ShotSplits, accuracy_by_split, ce_loss, estimate_prior, la_loss, zero_shot_predict
from .peft import PeftConfig, PeftState, attach, count_peft_params, default_bottleneck_dim
from .rng import RngStream
from .tensor import Tensor, backward, no_grad
from .trainer import TrainConfig, audit_params, evaluate_model, load_checkpoint, save_checkpoint, train
from .tte import TteConfig, ensemble_logits, five_crops, validate_expand

__version__ = "0.1.0"
