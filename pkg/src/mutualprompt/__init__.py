"""Mutual prompting of frozen miniature vision/text encoders for domain adaptation."""

from .config import Mode, RunConfig, load_config
from .data import DomainDatasetSpec, DomainShift, generate
from .encoders import EncoderConfig, FrozenEncoders
from .model import MutualPromptModel
from .prompter import MutualPrompter, PrompterConfig, PromptedPair, Strategy
from .trainer import build_model, train, train_dg, train_msda

__all__ = [
    "DomainDatasetSpec",
    "DomainShift",
    "EncoderConfig",
    "FrozenEncoders",
    "Mode",
    "MutualPromptModel",
    "MutualPrompter",
    "PromptedPair",
    "PrompterConfig",
    "RunConfig",
    "Strategy",
    "build_model",
    "generate",
    "load_config",
    "train",
    "train_dg",
    "train_msda",
]
