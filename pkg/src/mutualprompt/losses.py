"""Cosine classification heads and training losses.

Loss functions take log-probabilities rather than probabilities: with a
temperature of 0.01 the softmax saturates easily, and a floored ``log(p)``
would silently zero the gradient of badly misclassified samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .prompter import PromptedPair

@dataclass
class LossWeights:
    lambda_c: float = 1.0
    lambda_i: float = 1.0
    tau: float = 0.01

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_c < 0 or self.lambda_i < 0:
            raise ValueError("loss weights must be non-negative")

def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError(f"zero-norm {what} embedding: cosine similarity undefined")
    return x / norms

def cosine_logits(v: torch.Tensor, s: torch.Tensor, tau: float) -> torch.Tensor:
    """``cos(v, s_k) / tau``. ``v`` ``(B, D)``; ``s`` ``(K, D)`` or per-instance ``(B, K, D)``."""
    vu = _unit(v, "visual")
    su = _unit(s, "text")
    if su.ndim == 2:
        return vu @ su.T / tau
    return torch.einsum("bd,bkd->bk", vu, su) / tau

def classify_log(pair: PromptedPair, tau: float) -> torch.Tensor:
    """Log-probabilities of the prompted head, ``(B, K)``."""
    return F.log_softmax(cosine_logits(pair.v_prime, pair.s_prime, tau), dim=-1)

def classify(pair: PromptedPair, tau: float) -> torch.Tensor:
    """Class probabilities of the prompted head, ``(B, K)``."""
    return classify_log(pair, tau).exp()

def zero_shot_log(v: torch.Tensor, s: torch.Tensor, tau: float) -> torch.Tensor:
    return F.log_softmax(cosine_logits(v, s, tau), dim=-1)

def zero_shot_classify(v: torch.Tensor, s: torch.Tensor, tau: float) -> torch.Tensor:
    """Probabilities from raw, un-prompted embeddings; ``s`` is ``(K, D)``."""
    return zero_shot_log(v, s, tau).exp()

def instance_similarity(pair: PromptedPair, tau: float) -> torch.Tensor:
    """``sim[a, b] = mean_k cos(s'_{a,k}, v'_b) / tau``, shape ``(B, B)``."""
    su = _unit(pair.s_prime, "text")
    vu = _unit(pair.v_prime, "visual")
    return torch.einsum("akd,bd->ab", su, vu) / (su.shape[1] * tau)

def l_idc(pair: PromptedPair, tau: float) -> torch.Tensor:
    """Instance-discrimination contrastive loss over one single-domain batch.

    Anchor ``a`` is positive with its own ``v'_a`` and negative with every other
    ``v'_b`` in the batch. Returns the mean over anchors.
    """
    if pair.v_prime.shape[0] == 0:
        raise ValueError("empty batch")
    return idc_from_similarity(instance_similarity(pair, tau))

def idc_from_similarity(sim: torch.Tensor) -> torch.Tensor:
    target = torch.arange(sim.shape[0])
    return F.cross_entropy(sim, target)

def _check_labels(log_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = log_probs.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels

def cross_entropy(log_probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-likelihood at ``labels``."""
    labels = _check_labels(log_probs, labels)
    if labels.numel() == 0:
        return log_probs.new_zeros(())
    return -log_probs.gather(1, labels[:, None]).mean()

def confidence_mask(weak_log_probs: torch.Tensor, pseudo_labels, threshold: float) -> torch.Tensor:
    """``P(pseudo label | weak view) >= T``, evaluated without gradient."""
    labels = _check_labels(weak_log_probs, pseudo_labels)
    conf = weak_log_probs.detach().exp().gather(1, labels[:, None])[:, 0]
    return conf >= threshold

def gated_cross_entropy(log_probs: torch.Tensor, pseudo_labels, mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy averaged over the whole batch, counting only masked samples.

    Zero when nothing passes the gate.
    """
    labels = _check_labels(log_probs, pseudo_labels)
    if labels.numel() == 0:
        return log_probs.new_zeros(())
    nll = -log_probs.gather(1, labels[:, None])[:, 0]
    return (nll * mask.to(nll.dtype)).mean()

def l_sup_source(weak_log_probs: torch.Tensor, labels) -> torch.Tensor:
    return cross_entropy(weak_log_probs, labels)

def l_sup_target(
    weak_log_probs: torch.Tensor, pseudo_labels, threshold: float, mask: torch.Tensor | None = None
) -> torch.Tensor:
    if mask is None:
        mask = confidence_mask(weak_log_probs, pseudo_labels, threshold)
    return gated_cross_entropy(weak_log_probs, pseudo_labels, mask)

def l_sc_source(strong_log_probs: torch.Tensor, labels) -> torch.Tensor:
    return cross_entropy(strong_log_probs, labels)

def l_sc_target(
    strong_log_probs: torch.Tensor,
    pseudo_labels,
    weak_log_probs: torch.Tensor,
    threshold: float,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Strong-view cross-entropy, gated by weak-view confidence at the pseudo label."""
    if mask is None:
        mask = confidence_mask(weak_log_probs, pseudo_labels, threshold)
    return gated_cross_entropy(strong_log_probs, pseudo_labels, mask)

def entropy(log_probs: torch.Tensor) -> torch.Tensor:
    # 0 * log 0 = 0; masking the input keeps -inf out of the backward pass too
    p = log_probs.exp()
    safe = torch.where(p > 0, log_probs, torch.zeros_like(log_probs))
    return -(p * safe).sum(dim=-1)

def l_im(log_probs: torch.Tensor) -> torch.Tensor:
    """Mean per-sample entropy minus entropy of the mean prediction.

    Non-positive by concavity of entropy; zero iff every row is the same
    distribution. Minimizing it makes predictions confident per sample and
    diverse across the batch.
    """
    if log_probs.shape[0] == 0:
        raise ValueError("empty prediction list")
    h_cond = entropy(log_probs).mean()
    log_p_bar = torch.logsumexp(log_probs, dim=0) - math.log(log_probs.shape[0])
    # the difference cancels to ~1e-22 noise near identical rows, where the
    # true value and gradient are both zero; clamp so the bound holds exactly
    return (h_cond - entropy(log_p_bar)).clamp(max=0.0)

def l_all(
    sup: torch.Tensor, sc: torch.Tensor, idc: torch.Tensor, im: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    return sup + sc + weights.lambda_c * idc + weights.lambda_i * im
