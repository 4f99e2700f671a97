"""Desk-scale T5 v1.1: numpy autodiff, span-corruption data, Adafactor/AdamW training."""

from .config import RunConfig, load_config
from .model import PRESETS, ModelConfig, init_params, param_count, preset
from .trainer import finetune, pretrain

__all__ = [
    "PRESETS",
    "ModelConfig",
    "RunConfig",
    "finetune",
    "init_params",
    "load_config",
    "param_count",
    "preset",
    "pretrain",
]
__version__ = "0.1.0"
