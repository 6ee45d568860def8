"""Frozen miniature text and vision encoders.

Both encoders expose the interface the mutual prompter needs: a class-token
embedding plus a sequence of context-token embeddings in a shared joint space.
Weights are drawn once from a seeded normal distribution and never trained.
They stay in the autograd graph so gradients reach the learnable prompt
contexts through every text layer.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "mutualprompt-encoders"
CHECKPOINT_VERSION = 1
VISION_OUTPUT_GAIN = 4.0


class ConfigError(ValueError):
    """Raised for inconsistent model or run configuration."""


@dataclass
class EncoderConfig:
    joint_dim: int = 64
    text_width: int = 64
    text_layers: int = 4
    text_heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 40
    image_size: int = 16
    image_channels: int = 3
    vision_hidden: int = 32
    vision_channels: int = 32
    vision_heads: int = 4
    seed: int = 0

    @property
    def vision_grid(self) -> tuple[int, int]:
        # two stride-2 stages
        side = self.image_size // 4
        return side, side

    def validate(self) -> None:
        if self.text_width % self.text_heads:
            raise ConfigError(
                f"text_width={self.text_width} not divisible by text_heads={self.text_heads}"
            )
        if self.joint_dim % self.vision_heads:
            raise ConfigError(
                f"joint_dim={self.joint_dim} not divisible by vision_heads={self.vision_heads}"
            )
        if self.image_size % 4 or self.image_size < 4:
            raise ConfigError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.text_layers < 0:
            raise ConfigError("text_layers must be >= 0")


@dataclass
class EncodedText:
    """Per-class text outputs.

    ``s`` is ``(K, D)``: the last-position output of the final layer, projected.
    ``s_tilde`` is ``(K, N, D)``: the first ``N`` positions, projected.
    """

    s: torch.Tensor
    s_tilde: torch.Tensor


@dataclass
class EncodedImage:
    """Batched vision outputs: ``v`` ``(B, D)``, ``v_tilde`` ``(B, HW, D)``,
    feature map ``z`` ``(B, H, W, C)`` and its spatial mean ``z_bar`` ``(B, C)``."""

    v: torch.Tensor
    v_tilde: torch.Tensor
    z: torch.Tensor
    z_bar: torch.Tensor


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d_k)) V``.

    Works on any leading batch dims. ``mask`` is boolean and broadcastable to
    the score matrix; ``False`` entries are excluded (additive ``-inf``).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"query/key width mismatch: Q has d_k={q.shape[-1]}, K has d_k={k.shape[-1]}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"key/value length mismatch: K has {k.shape[-2]} rows, V has {v.shape[-2]} rows"
        )
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    """Multi-head attention with per-head query/key/value projections and an
    output projection ``M_O``. Self-attention when ``context`` is omitted."""

    def __init__(self, dim: int, heads: int, out_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, out_dim or dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.head_dim).transpose(-3, -2)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        context = x if context is None else context
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        if mask is not None:
            mask = mask.unsqueeze(-3)  # broadcast over heads
        out = attention(q, k, v, mask)
        out = out.transpose(-3, -2).flatten(-2)
        return self.out_proj(out)


def mhsa(tokens: torch.Tensor, layer: MultiHeadAttention) -> torch.Tensor:
    """Multi-head self-attention of ``tokens`` under frozen ``layer`` weights."""
    return layer(tokens)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer: LN(x + MHSA(x)), then LN(x + FF(x))."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.ln1 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)
        self.ln2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self.ln1(self.attn(x, mask=mask) + x)
        return self.ln2(self.ff(x) + x)


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe


def _freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def _seeded_init(module: nn.Module, gen: torch.Generator) -> None:
    """Normal weights scaled by 1/sqrt(fan_in); zero biases; unit LayerNorm gains.

    Parameters are visited in ``named_parameters`` order, so the draw is a pure
    function of the seed and the architecture.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.ndim == 1:  # LayerNorm gain
                p.fill_(1.0)
            elif "token_embedding" in name:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype))
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(fan_in))


class TextEncoder(nn.Module):
    """Token embedding + sinusoidal positions + ``J`` encoder layers + final
    LayerNorm and projection into the joint space."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.text_width, cfg.text_heads) for _ in range(cfg.text_layers)
        )
        self.ln_final = nn.LayerNorm(cfg.text_width)
        self.proj = nn.Linear(cfg.text_width, cfg.joint_dim, bias=False)
        self.register_buffer(
            "positions", sinusoidal_positions(cfg.max_text_len, cfg.text_width), persistent=False
        )

    def embed_tokens(self, token_ids: list[int] | torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        return self.token_embedding(ids)

    def forward(self, context: torch.Tensor, name_tokens: list[list[int]]) -> EncodedText:
        """Encode ``[context, name_k]`` for every class name.

        ``context`` is ``(N, width)``; the same tensor is prepended to every name.
        Names of different lengths are right-padded and the padding is masked
        out of the attention keys, so each sequence sees only its own tokens.
        """
        n = context.shape[0]
        lengths = [n + len(t) for t in name_tokens]
        longest = max(lengths)
        if longest > self.cfg.max_text_len:
            raise ValueError(
                f"prompt length {longest} exceeds max_text_len={self.cfg.max_text_len}"
            )
        rows = []
        for tokens in name_tokens:
            pad = longest - n - len(tokens)
            parts = [context, self.embed_tokens(tokens)]
            if pad:
                parts.append(context.new_zeros(pad, context.shape[1]))
            rows.append(torch.cat(parts))
        x = torch.stack(rows) + self.positions[:longest].to(context.dtype)
        key_ok = torch.arange(longest)[None, :] < torch.tensor(lengths)[:, None]
        mask = key_ok[:, None, :]  # (K, 1, L): every query sees valid keys
        for layer in self.layers:
            x = layer(x, mask=mask)
        x = self.proj(self.ln_final(x))
        last = torch.tensor(lengths) - 1
        s = x[torch.arange(len(name_tokens)), last]
        return EncodedText(s=s, s_tilde=x[:, :n])


class VisionEncoder(nn.Module):
    """Two strided, reflect-padded convolution stages followed by attention pooling.

    The pooled input is ``[GAP(z), z_1, ..., z_HW]``; the class-token output is
    ``v`` and the spatial outputs are ``v_tilde``. No positional encoding is
    used, so the pooling is permutation-equivariant over spatial tokens.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        # reflect padding keeps constant images constant without making the stack fully
        # translation invariant, which would blind it to where a pattern sits
        conv = dict(kernel_size=4, stride=2, padding=1, padding_mode="reflect")
        self.conv1 = nn.Conv2d(cfg.image_channels, cfg.vision_hidden, **conv)
        self.conv2 = nn.Conv2d(cfg.vision_hidden, cfg.vision_channels, **conv)
        heads = cfg.vision_heads
        if cfg.vision_channels % heads:
            raise ConfigError(
                f"vision_channels={cfg.vision_channels} not divisible by vision_heads={heads}"
            )
        self.pool = MultiHeadAttention(cfg.vision_channels, heads, out_dim=cfg.joint_dim)

    def forward(self, x: torch.Tensor) -> EncodedImage:
        """``x`` is ``(B, H, W, channels)`` or a single ``(H, W, channels)`` image."""
        single = x.ndim == 3
        if single:
            x = x[None]
        cfg = self.cfg
        expected = (cfg.image_size, cfg.image_size, cfg.image_channels)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"image shape {tuple(x.shape[1:])} does not match {expected}")
        h = F.gelu(self.conv1(x.permute(0, 3, 1, 2)))
        z = torch.tanh(self.conv2(h)).permute(0, 2, 3, 1)  # (B, H', W', C)
        flat = z.flatten(1, 2)
        z_bar = flat.mean(dim=1)
        out = self.pool(torch.cat([z_bar[:, None], flat], dim=1))
        enc = EncodedImage(v=out[:, 0], v_tilde=out[:, 1:], z=z, z_bar=z_bar)
        if single:
            enc = EncodedImage(*(t[0] for t in (enc.v, enc.v_tilde, enc.z, enc.z_bar)))
        return enc


class FrozenEncoders(nn.Module):
    """The frozen text/vision pair, built deterministically from ``cfg.seed``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.text = TextEncoder(cfg)
        self.vision = VisionEncoder(cfg)
        self.double()
        gen = torch.Generator().manual_seed(cfg.seed)
        _seeded_init(self, gen)
        with torch.no_grad():
            # pooled image embeddings on the same ~sqrt(D) norm scale as text embeddings
            self.vision.pool.out_proj.weight.mul_(VISION_OUTPUT_GAIN)
        _freeze(self)

    def encode_text(self, context: torch.Tensor, name_tokens: list[list[int]]) -> EncodedText:
        return self.text(context, name_tokens)

    def encode_image(self, x: torch.Tensor) -> EncodedImage:
        return self.vision(x)

    def save(self, path: str | Path) -> None:
        save_encoders(self, path)


@torch.no_grad()
def align_vision_projection(
    encoders: FrozenEncoders,
    images: torch.Tensor,
    labels: torch.Tensor,
    class_targets: torch.Tensor,
    ridge: float = 1e-3,
) -> float:
    """Refit the vision pool's output projection so that ``v`` of each anchor
    image regresses onto its class target (ridge least squares, closed form).

    Stands in for contrastive pretraining: afterwards the zero-shot head built
    from ``class_targets`` is informative on anchor-like inputs. Returns the
    fit's mean squared residual.
    """
    proj = encoders.vision.pool.out_proj
    captured = []
    handle = proj.register_forward_hook(lambda mod, inp, out: captured.append(inp[0][:, 0]))
    try:
        encoders.vision(images)
    finally:
        handle.remove()
    h = captured[0]
    x = torch.cat([h, torch.ones_like(h[:, :1])], dim=1)
    y = class_targets[labels]
    reg = ridge * len(x) * torch.eye(x.shape[1], dtype=x.dtype)
    reg[-1, -1] = 0.0  # bias unpenalized
    coef = torch.linalg.solve(x.T @ x + reg, x.T @ y)
    proj.weight.copy_(coef[:-1].T)
    proj.bias.copy_(coef[-1])
    return float(((x @ coef - y) ** 2).mean())


def save_encoders(encoders: FrozenEncoders, path: str | Path) -> None:
    """Write frozen weights to an ``.npz`` container with a JSON header entry."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(encoders.cfg),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in encoders.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_encoders(path: str | Path) -> FrozenEncoders:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an encoder checkpoint (format={header.get('format')!r})")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: encoder checkpoint version {header.get('version')} "
                f"!= supported {CHECKPOINT_VERSION}"
            )
        enc = FrozenEncoders(EncoderConfig(**header["config"]))
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__header__"}
    enc.load_state_dict(state)
    _freeze(enc)
    return enc
