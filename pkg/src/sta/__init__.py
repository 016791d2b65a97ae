"""Shuffle-then-assemble pre-training of object-agnostic feature maps for
visual relationship classification, with synthetic relationship worlds."""

from .dataworld import WorldSpec, generate_world, make_splits
from .errors import StaError
from .experiment import ExperimentConfig, run_ablation, run_variants
from .nets import ModelConfig, init_params
from .trainer import FinetuneConfig, PretrainConfig, finetune, pretrain

__version__ = "0.1.0"
