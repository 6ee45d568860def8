import numpy as np
import pytest
import torch
from hypothesis import settings

from mutualprompt.config import Mode, RunConfig, shifted_spec
from mutualprompt.data import DomainShift
from mutualprompt.encoders import EncoderConfig, FrozenEncoders
from mutualprompt.model import MutualPromptModel
from mutualprompt.prompter import PrompterConfig

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

torch.set_num_threads(1)


def small_encoder_config(**kw) -> EncoderConfig:
    base = dict(joint_dim=16, text_width=16, text_layers=2, text_heads=2, max_text_len=12,
                image_size=8, vision_hidden=8, vision_channels=8, vision_heads=2)
    base.update(kw)
    return EncoderConfig(**base)


def small_prompter_config(**kw) -> PrompterConfig:
    base = dict(decoder_layers=1, internal_dim=8, heads=2)
    base.update(kw)
    return PrompterConfig(**base)


def small_model(num_classes: int = 3, n_ctx: int = 4, seed: int = 0, **prompter_kw) -> MutualPromptModel:
    return MutualPromptModel(
        small_encoder_config(),
        small_prompter_config(**prompter_kw),
        num_classes,
        n_ctx=n_ctx,
        prompt_seed=seed,
    )


def tiny_run_config(**kw) -> RunConfig:
    """Seconds-scale UDA run on 8x8 images."""
    data = shifted_spec(num_classes=3, n_source=8, n_target=8, n_eval=4, image_size=8)
    cfg = RunConfig(
        epochs=2,
        batch_size=8,
        n_ctx=4,
        encoder=small_encoder_config(),
        prompter=small_prompter_config(),
        data=data,
        anchor_per_class=6,
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    cfg.mode = Mode(cfg.mode)
    return cfg


def tiny_msda_config(n_sources: int = 3, **kw) -> RunConfig:
    cfg = tiny_run_config(mode="msda", **kw)
    cfg.data.sources = [
        DomainShift(f"src{i}", rotation_deg=10.0 * i, seed=i) for i in range(n_sources)
    ]
    return cfg


def tiny_dg_config(**kw) -> RunConfig:
    cfg = tiny_run_config(mode="dg", **kw)
    cfg.data.sources = [DomainShift("src0"), DomainShift("src1", rotation_deg=15.0, seed=1)]
    cfg.data.unseen = cfg.data.target
    cfg.data.target = None
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def encoders():
    return FrozenEncoders(small_encoder_config())
