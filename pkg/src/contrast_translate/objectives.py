"""Adversarial, R1 and cycle losses and their weighted totals."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    cyc: float = 1.0
    ct_d: float = 0.1
    ct_g: float = 0.1
    r1_gamma: float = 10.0
    r1_interval: int = 16

    def validate(self) -> None:
        for name in ("cyc", "ct_d", "ct_g", "r1_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.r1_interval < 1:
            raise ValueError("r1_interval must be >= 1")


def adv_loss_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating discriminator loss, to be minimized."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def adv_loss_g(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def r1_penalty(d_adv, real: torch.Tensor, gamma: float) -> torch.Tensor:
    """(gamma / 2) * E[||grad_x D_adv(x)||^2] on real images.

    ``real`` is copied into a leaf that tracks input gradients; the returned
    penalty is differentiable w.r.t. the discriminator parameters.
    """
    x = real.detach().requires_grad_(True)
    out = d_adv(x)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True)
    sq = grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1)
    return 0.5 * gamma * sq.mean()


def cycle_loss(x_o: torch.Tensor, x_cyc: torch.Tensor) -> torch.Tensor:
    if x_o.shape != x_cyc.shape:
        raise ValueError(f"shape mismatch: {tuple(x_o.shape)} vs {tuple(x_cyc.shape)}")
    return (x_o - x_cyc).abs().mean()


def total_d_loss(parts: dict, weights: LossWeights) -> torch.Tensor:
    """adv_d + lambda_ct_d * ct_d (+ r1 on regularization steps).

    ``parts['r1']`` is expected to already carry the lazy interval factor.
    """
    total = parts["adv"] + weights.ct_d * parts.get("ct", 0.0)
    if parts.get("r1") is not None:
        total = total + parts["r1"]
    return total


def total_ge_loss(parts: dict, weights: LossWeights) -> torch.Tensor:
    return (parts["adv"] + weights.cyc * parts.get("cyc", 0.0)
            + weights.ct_g * parts.get("ct", 0.0))
