"""Frozen encoders + shared prompt contexts + mutual prompter."""

from __future__ import annotations

from functools import cached_property

import torch
import torch.nn as nn

from .encoders import EncodedImage, EncodedText, EncoderConfig, FrozenEncoders
from .losses import classify_log, zero_shot_log
from .prompt_bank import PromptBank, default_class_names
from .prompter import MutualPrompter, PromptedPair, PrompterConfig

TRAINABLE_GROUPS = ("p", "G", "gamma_v", "gamma_s")


class MutualPromptModel(nn.Module):
    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        prompter_cfg: PrompterConfig,
        num_classes: int,
        n_ctx: int = 32,
        tau: float = 0.01,
        class_names: list[list[int]] | None = None,
        prompt_seed: int = 0,
        encoders: FrozenEncoders | None = None,
    ):
        super().__init__()
        names = class_names or default_class_names(num_classes)
        if len(names) != num_classes:
            raise ValueError(f"{len(names)} class names for K={num_classes}")
        self.encoders = encoders if encoders is not None else FrozenEncoders(encoder_cfg)
        self.prompts = PromptBank(n_ctx, self.encoders.cfg.text_width, names, seed=prompt_seed)
        if self.prompts.max_length() > self.encoders.cfg.max_text_len:
            raise ValueError(
                f"prompt length {self.prompts.max_length()} exceeds "
                f"max_text_len={self.encoders.cfg.max_text_len}"
            )
        self.prompter = MutualPrompter(self.encoders.cfg.joint_dim, prompter_cfg, seed=prompt_seed)
        self.tau = tau

    @property
    def num_classes(self) -> int:
        return self.prompts.num_classes

    def trainable_groups(self) -> dict[str, list[nn.Parameter]]:
        """The exact set of optimized tensors, grouped by role."""
        return {
            "p": [self.prompts.p],
            "G": self.prompter.g_parameters(),
            "gamma_v": [self.prompter.gamma_v],
            "gamma_s": [self.prompter.gamma_s],
        }

    def named_trainable(self) -> dict[str, nn.Parameter]:
        ids = {id(p) for group in self.trainable_groups().values() for p in group}
        return {n: p for n, p in self.named_parameters() if id(p) in ids}

    def encode_texts(self) -> EncodedText:
        return self.encoders.encode_text(self.prompts.p, self.prompts.class_names)

    @cached_property
    def naive_text(self) -> EncodedText:
        # frozen encoders + fixed tokens: computed once per model
        with torch.no_grad():
            template = self.prompts.naive_prompt(0)[: -len(self.prompts.class_names[0])]
            ctx = self.encoders.text.embed_tokens(template)
            return self.encoders.encode_text(ctx, self.prompts.class_names)

    def encode_images(self, images: torch.Tensor) -> EncodedImage:
        return self.encoders.encode_image(images)

    def prompt(self, images: torch.Tensor, texts: EncodedText | None = None) -> PromptedPair:
        texts = self.encode_texts() if texts is None else texts
        return self.prompter.prompt_pair(self.encode_images(images), texts)

    def log_probs(self, images: torch.Tensor, texts: EncodedText | None = None) -> torch.Tensor:
        return classify_log(self.prompt(images, texts), self.tau)

    def naive_log_probs(self, images: torch.Tensor) -> torch.Tensor:
        return zero_shot_log(self.encode_images(images).v, self.naive_text.s, self.tau)

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        texts = self.encode_texts()
        out = [
            self.log_probs(images[i : i + batch_size], texts).argmax(dim=-1)
            for i in range(0, images.shape[0], batch_size)
        ]
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)

    @torch.no_grad()
    def predict_naive(self, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        out = [
            self.naive_log_probs(images[i : i + batch_size]).argmax(dim=-1)
            for i in range(0, images.shape[0], batch_size)
        ]
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)
