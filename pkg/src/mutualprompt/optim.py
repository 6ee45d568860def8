"""Adaptive-moment optimizer and per-epoch cosine learning-rate schedule."""

from __future__ import annotations

import math

import torch


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from ``base_lr`` at epoch 0 to 0 at ``total_epochs``."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


class Adam:
    """Adam over an explicit, named parameter registry.

    Only tensors in ``params`` are ever touched; parameters whose ``.grad`` is
    ``None`` are skipped for that step.
    """

    def __init__(
        self,
        params: dict[str, torch.Tensor],
        lr: float = 3e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.exp_avg[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v = self.exp_avg_sq[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / bc1)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "step": self.step_count,
            "exp_avg": {n: t.clone() for n, t in self.exp_avg.items()},
            "exp_avg_sq": {n: t.clone() for n, t in self.exp_avg_sq.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if set(state["exp_avg"]) != set(self.params):
            raise ValueError("optimizer state does not match the parameter registry")
        self.lr = state["lr"]
        self.step_count = state["step"]
        for n in self.params:
            self.exp_avg[n].copy_(state["exp_avg"][n])
            self.exp_avg_sq[n].copy_(state["exp_avg_sq"][n])
