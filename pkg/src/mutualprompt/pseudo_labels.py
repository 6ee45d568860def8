"""Target pseudo-labels from an ensemble of naive zero-shot and model predictions."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch


@dataclass
class PseudoLabels:
    """Batched pseudo-label records; row ``i`` is the record for target sample ``i``."""

    naive_soft: torch.Tensor
    model_soft: torch.Tensor
    ensemble_soft: torch.Tensor
    hard_label: torch.Tensor
    confidence: torch.Tensor
    accepted: torch.Tensor

    def __len__(self) -> int:
        return self.hard_label.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.double().mean()) if len(self) else 0.0


def alpha_schedule(epoch: int, total_epochs: int, kind: str = "linear") -> float:
    """Ensemble weight on the model prediction: 0 at epoch 0, 1 at ``total_epochs``."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch > total_epochs:
        warnings.warn(f"epoch {epoch} beyond schedule end {total_epochs}; clamping alpha to 1")
        return 1.0
    frac = epoch / total_epochs
    if kind == "linear":
        return frac
    if kind == "cosine":
        return 0.5 * (1.0 - math.cos(math.pi * frac))
    if kind == "step":
        return 0.0 if frac < 0.5 else 1.0
    raise ValueError(f"unknown alpha schedule {kind!r}")


def ensemble(naive_soft: torch.Tensor, model_soft: torch.Tensor, alpha: float) -> torch.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return naive_soft.clone()
    if alpha == 1.0:
        return model_soft.clone()
    return (1.0 - alpha) * naive_soft + alpha * model_soft


def make_pseudo_labels(
    naive_soft: torch.Tensor, model_soft: torch.Tensor, alpha: float, threshold: float
) -> PseudoLabels:
    """Combine two ``(B, K)`` soft predictions into records.

    The hard label is the ensemble argmax (ties go to the lowest index, as
    ``torch.argmax`` returns the first maximum). Confidence is the model's
    probability at that label.
    """
    naive_soft = naive_soft.detach()
    model_soft = model_soft.detach()
    ens = ensemble(naive_soft, model_soft, alpha)
    hard = ens.argmax(dim=-1)
    conf = model_soft.gather(1, hard[:, None])[:, 0]
    return PseudoLabels(
        naive_soft=naive_soft,
        model_soft=model_soft,
        ensemble_soft=ens,
        hard_label=hard,
        confidence=conf,
        accepted=conf >= threshold,
    )


@torch.no_grad()
def label_batch(model, images: torch.Tensor, alpha: float, threshold: float) -> PseudoLabels:
    """Pseudo-label a batch of (weakly augmented) target images with ``model``.

    ``model`` is a :class:`~mutualprompt.model.MutualPromptModel`.
    """
    if images.shape[0] == 0:
        empty = torch.zeros(0, model.num_classes, dtype=torch.float64)
        return make_pseudo_labels(empty, empty, alpha, threshold)
    naive = model.naive_log_probs(images).exp()
    learned = model.log_probs(images).exp()
    return make_pseudo_labels(naive, learned, alpha, threshold)
