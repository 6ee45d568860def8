"""Post-model mutual prompting.

A stack of transformer decoder layers adjusts each modality's class-token
embedding using the other modality's context tokens:

* visual branch: ``v' = v + gamma_v * G(v, s_tilde)``, text contexts as keys;
* textual branch: ``s'_k = s_k + gamma_s * G(s_k, v_tilde)``, image spatial
  tokens as keys, which makes every ``s'_k`` depend on the instance.

By default one ``G`` serves both directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from .encoders import ConfigError, EncodedImage, EncodedText, FeedForward, MultiHeadAttention


class Strategy(str, Enum):
    NONE = "none"
    INDEPENDENT = "independent"
    SIMPLE_SYNERGY = "simple_synergy"
    CROSS_ATTENTION = "cross_attention"


@dataclass
class PrompterConfig:
    decoder_layers: int = 2
    internal_dim: int = 32
    heads: int = 4
    gamma_v_init: float = 0.1
    gamma_s_init: float = 0.5
    share_parameters: bool = True
    strategy: Strategy = Strategy.CROSS_ATTENTION
    visual_prompting: bool = True
    textual_prompting: bool = True

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)

    def validate(self) -> None:
        if self.internal_dim % self.heads:
            raise ConfigError(
                f"internal_dim={self.internal_dim} not divisible by heads={self.heads}"
            )
        if self.decoder_layers < 1:
            raise ConfigError("decoder_layers must be >= 1")


@dataclass
class PromptedPair:
    """Prompted embeddings for a batch: ``v_prime`` ``(B, D)``, ``s_prime`` ``(B, K, D)``."""

    v_prime: torch.Tensor
    s_prime: torch.Tensor


class DecoderLayer(nn.Module):
    """Self-attention over the queries, cross-attention into the context, feed-forward.

    Each block is wrapped as ``LN(block(x) + x)``. Queries here are single
    tokens, so a causal mask on the self-attention would be a no-op and none
    is applied.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.ln1 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)
        self.ln3 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = self.ln1(self.self_attn(x) + x)
        x = self.ln2(self.cross_attn(x, context) + x)
        return self.ln3(self.ff(x) + x)


class PromptNet(nn.Module):
    """InProj -> L decoder layers -> OutProj, applied token-wise at the ends."""

    def __init__(self, joint_dim: int, cfg: PrompterConfig):
        super().__init__()
        d = cfg.internal_dim
        self.in_proj = nn.Sequential(nn.Linear(joint_dim, d), nn.LayerNorm(d))
        self.layers = nn.ModuleList(DecoderLayer(d, cfg.heads) for _ in range(cfg.decoder_layers))
        self.out_proj = nn.Sequential(nn.Linear(d, joint_dim), nn.LayerNorm(joint_dim))

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """``query`` ``(..., D)`` attends to ``context`` ``(..., M, D)``; leading
        dims broadcast against each other."""
        x = self.in_proj(query)[..., None, :]
        ctx = self.in_proj(context)
        for layer in self.layers:
            x = layer(x, ctx)
        return self.out_proj(x[..., 0, :])


class LinearSynergy(nn.Module):
    """One linear map per direction from the other modality's pooled context."""

    def __init__(self, joint_dim: int):
        super().__init__()
        self.text_to_visual = nn.Linear(joint_dim, joint_dim)
        self.visual_to_text = nn.Linear(joint_dim, joint_dim)


class MutualPrompter(nn.Module):
    """Holds ``G`` (one or two :class:`PromptNet`) and the residual gains."""

    def __init__(self, joint_dim: int, cfg: PrompterConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        # default nn init, drawn from a seeded global stream that is restored afterwards
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            if cfg.strategy is Strategy.SIMPLE_SYNERGY:
                self.g = LinearSynergy(joint_dim)
                self.g_text = None
            else:
                self.g = PromptNet(joint_dim, cfg)
                self.g_text = None if cfg.share_parameters else PromptNet(joint_dim, cfg)
        finally:
            torch.random.set_rng_state(gen_state)
        self.double()
        self.gamma_v = nn.Parameter(torch.tensor(float(cfg.gamma_v_init), dtype=torch.float64))
        self.gamma_s = nn.Parameter(torch.tensor(float(cfg.gamma_s_init), dtype=torch.float64))

    @property
    def _text_net(self) -> nn.Module:
        return self.g if self.g_text is None else self.g_text

    def g_parameters(self) -> list[nn.Parameter]:
        params = list(self.g.parameters())
        if self.g_text is not None:
            params += list(self.g_text.parameters())
        return params

    def prompt_visual(self, v: torch.Tensor, s_tilde: torch.Tensor, v_tilde=None) -> torch.Tensor:
        """``v`` ``(..., D)``; ``s_tilde`` ``(N, D)`` pooled text contexts."""
        if v.shape[-1] != s_tilde.shape[-1]:
            raise ValueError(f"width mismatch: v has {v.shape[-1]}, s_tilde has {s_tilde.shape[-1]}")
        strategy = self.cfg.strategy
        if strategy is Strategy.NONE or not self.cfg.visual_prompting:
            return v
        if strategy is Strategy.SIMPLE_SYNERGY:
            v_star = self.g.text_to_visual(s_tilde.mean(dim=-2)).expand_as(v)
        elif strategy is Strategy.INDEPENDENT:
            if v_tilde is None:
                raise ValueError("independent prompting needs the image's own context tokens")
            v_star = self.g(v, v_tilde)
        else:
            v_star = self.g(v, s_tilde)
        return v + self.gamma_v * v_star

    def prompt_textual(
        self, s: torch.Tensor, v_tilde: torch.Tensor, s_tilde=None
    ) -> torch.Tensor:
        """``s`` ``(K, D)`` class embeddings, ``v_tilde`` ``(B, HW, D)`` -> ``(B, K, D)``.

        Unbatched ``s`` ``(D,)`` with ``v_tilde`` ``(HW, D)`` returns ``(D,)``.
        """
        if s.shape[-1] != v_tilde.shape[-1]:
            raise ValueError(f"width mismatch: s has {s.shape[-1]}, v_tilde has {v_tilde.shape[-1]}")
        single = s.ndim == 1
        if single:
            s, v_tilde = s[None], v_tilde[None]
            s_tilde = None if s_tilde is None else s_tilde[None]
        batch = v_tilde.shape[0]
        strategy = self.cfg.strategy
        base = s[None].expand(batch, *s.shape)
        if strategy is Strategy.NONE or not self.cfg.textual_prompting:
            out = base
        else:
            if strategy is Strategy.SIMPLE_SYNERGY:
                s_star = self.g.visual_to_text(v_tilde.mean(dim=-2))[:, None, :]
            elif strategy is Strategy.INDEPENDENT:
                if s_tilde is None:
                    raise ValueError("independent prompting needs the class's own context tokens")
                s_star = self._text_net(s, s_tilde)[None]
            else:
                s_star = self._text_net(s[None], v_tilde[:, None])
            out = base + self.gamma_s * s_star
        return out[0, 0] if single else out

    def prompt_pair(self, image: EncodedImage, texts: EncodedText) -> PromptedPair:
        """Prompt a batch of images against all ``K`` class texts.

        The visual branch uses the class-mean of the text context tokens so
        that each instance has a single ``v'``.
        """
        if texts.s.shape[0] == 0:
            raise ValueError("empty text list")
        if texts.s.shape[0] < 2:
            raise ValueError(f"need K >= 2 class texts, got {texts.s.shape[0]}")
        pooled = texts.s_tilde.mean(dim=0)
        v_prime = self.prompt_visual(image.v, pooled, v_tilde=image.v_tilde)
        s_prime = self.prompt_textual(texts.s, image.v_tilde, s_tilde=texts.s_tilde)
        return PromptedPair(v_prime=v_prime, s_prime=s_prime)
