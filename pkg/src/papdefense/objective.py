"""Training losses for the prompt bank and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .prompt_bank import PromptBank, apply


class ObjectiveConfigError(ValueError):
    pass


@dataclass
class LossBreakdown:
    adv: Tensor
    nat: Tensor
    sim: Tensor
    mis: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        keys = ("adv", "nat", "sim", "mis", "total")
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in keys}


def _cross_entropy(model, images, labels, return_logits):
    logits = model(images)
    loss = F.cross_entropy(logits, labels)
    return (loss, logits) if return_logits else loss


def loss_adv(model: nn.Module, prompted_adv: Tensor, labels: Tensor, return_logits=False):
    """Mean cross-entropy on adversarial images prompted with their true-class prompts."""
    return _cross_entropy(model, prompted_adv, labels, return_logits)


def loss_nat(model: nn.Module, prompted_nat: Tensor, labels: Tensor, return_logits=False):
    """Same functional as :func:`loss_adv`, on prompted natural images."""
    return _cross_entropy(model, prompted_nat, labels, return_logits)


def loss_sim(prompted_adv: Tensor, natural: Tensor) -> Tensor:
    """Mean of ``exp(|prompted - natural|)`` over every pixel and channel."""
    if prompted_adv.shape != natural.shape:
        raise ValueError(
            f"shape mismatch: {tuple(prompted_adv.shape)} vs {tuple(natural.shape)}"
        )
    return torch.exp((prompted_adv - natural).abs()).mean()


def mismatch_hinge(logits: Tensor, labels: Tensor, wrong_labels: Tensor, tau: float) -> Tensor:
    """Batch mean of ``max(z[y'] - z[y], -tau)`` on raw logits."""
    z_wrong = logits.gather(1, wrong_labels[:, None]).squeeze(1)
    z_true = logits.gather(1, labels[:, None]).squeeze(1)
    return (z_wrong - z_true).clamp_min(-tau).mean()


def sample_wrong_labels(labels: Tensor, num_classes: int, generator: torch.Generator) -> Tensor:
    """Draw y' uniformly from the classes other than y, independently per example."""
    offset = torch.randint(1, num_classes, labels.shape, generator=generator)
    return (labels + offset) % num_classes


def loss_mis(model: nn.Module, bank: PromptBank, adv_images: Tensor, labels: Tensor,
             generator: torch.Generator, tau: float = 0.1, clamp: bool = False) -> Tensor:
    """Data-prompt mismatch loss: prompt with a random wrong class and keep the
    true class's logit ahead of that class's logit (hinge floored at ``-tau``)."""
    if bank.num_classes < 2:
        raise ObjectiveConfigError("mismatch loss needs at least two classes")
    wrong = sample_wrong_labels(labels, bank.num_classes, generator)
    logits = model(apply(bank, adv_images, wrong, clamp=clamp))
    return mismatch_hinge(logits, labels, wrong, tau)


def loss_all(adv, nat, sim, mis, lambda1=3.0, lambda2=400.0, lambda3=4.0) -> LossBreakdown:
    """``adv + lambda1 * nat + lambda2 * sim + lambda3 * mis``."""
    for name, value in (("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)):
        if value < 0:
            raise ObjectiveConfigError(f"{name} must be >= 0, got {value}")
    total = adv + lambda1 * nat + lambda2 * sim + lambda3 * mis
    return LossBreakdown(adv=adv, nat=nat, sim=sim, mis=mis, total=total)
