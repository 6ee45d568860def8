"""Learnable shared prompt contexts and the fixed naive prompt."""

from __future__ import annotations

import torch
import torch.nn as nn

# Toy vocabulary: a handful of template words, class-name tokens after them.
TOKEN_A = 1
TOKEN_PHOTO = 2
TOKEN_OF = 3
FIRST_NAME_TOKEN = 4

NAIVE_TEMPLATE = (TOKEN_A, TOKEN_PHOTO, TOKEN_OF, TOKEN_A)
CONTEXT_INIT_STD = 0.02


def default_class_names(num_classes: int) -> list[list[int]]:
    """Synthetic class names: even classes get one token, odd classes two."""
    names = []
    next_id = FIRST_NAME_TOKEN
    for k in range(num_classes):
        length = 1 if k % 2 == 0 else 2
        names.append(list(range(next_id, next_id + length)))
        next_id += length
    return names


class PromptBank(nn.Module):
    """One ``(N, width)`` context matrix shared by every class and every domain."""

    def __init__(
        self,
        n_ctx: int,
        width: int,
        class_names: list[list[int]],
        seed: int = 0,
        init_std: float = CONTEXT_INIT_STD,
    ):
        super().__init__()
        if n_ctx < 1:
            raise ValueError(f"need at least one context token, got N={n_ctx}")
        if len(class_names) < 2:
            raise ValueError(f"need at least two classes, got K={len(class_names)}")
        gen = torch.Generator().manual_seed(seed)
        self.p = nn.Parameter(torch.randn(n_ctx, width, generator=gen, dtype=torch.float64) * init_std)
        self.class_names = [list(t) for t in class_names]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_ctx(self) -> int:
        return self.p.shape[0]

    def _check(self, k: int) -> None:
        if not 0 <= k < self.num_classes:
            raise IndexError(f"class index {k} out of range [0, {self.num_classes})")

    def assemble_prompt(self, k: int) -> tuple[nn.Parameter, list[int]]:
        self._check(k)
        return self.p, self.class_names[k]

    def naive_prompt(self, k: int) -> list[int]:
        """``[a, photo, of, a, CLS_k]`` as token ids."""
        self._check(k)
        return [*NAIVE_TEMPLATE, *self.class_names[k]]

    def max_length(self) -> int:
        longest = max(len(t) for t in self.class_names)
        return max(self.n_ctx, len(NAIVE_TEMPLATE)) + longest
