"""Amplitude-prompt weight update.

Every ``period`` epochs the weight is rescaled by the ratio of robust
accuracies on adversarial training images prompted with amplitude prompts
only versus phase prompts only:

    w_t = w_{t-1} * #correct(amplitude-only) / #correct(phase-only)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import torch
from torch import Tensor, nn

from .prompt_bank import PromptBank, apply_parts

WEIGHT_FLOOR = 1e-6
REPORT_ZERO_BELOW = 1e-3


@dataclass(frozen=True)
class WeightUpdateRecord:
    epoch: int
    amp_correct: int
    phase_correct: int
    ratio: float | None
    w_before: float
    w_after: float
    skipped_degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def schedule_should_update(epoch: int, period: int) -> bool:
    if epoch < 1 or period < 1:
        raise ValueError("epoch and period must be >= 1")
    return epoch % period == 0


def apply_ratio(w_before: float, amp_correct: int, phase_correct: int,
                floor: float = WEIGHT_FLOOR) -> tuple[float | None, float, bool]:
    """Return ``(ratio, w_after, skipped)``; a zero denominator leaves w unchanged."""
    if phase_correct == 0:
        return None, w_before, True
    ratio = amp_correct / phase_correct
    return ratio, max(w_before * ratio, floor), False


@torch.no_grad()
def count_correct(bank: PromptBank, model: nn.Module, adv_images: Tensor, labels: Tensor,
                  weight: float) -> tuple[int, int]:
    amp_only = apply_parts(bank, adv_images, labels, use_phase=False, weight=weight)
    phase_only = apply_parts(bank, adv_images, labels, use_amplitude=False)
    amp_correct = int((model(amp_only).argmax(1) == labels).sum())
    phase_correct = int((model(phase_only).argmax(1) == labels).sum())
    return amp_correct, phase_correct


def update_weight(bank: PromptBank, model: nn.Module,
                  adv_batches: Iterable[tuple[Tensor, Tensor]], epoch: int = 0,
                  floor: float = WEIGHT_FLOOR) -> tuple[float, WeightUpdateRecord]:
    """Compute the next weight from a stream of ``(adversarial images, labels)``.

    The bank is not modified. Amplitude-only images use the current weight.
    """
    w_before = float(bank.weight)
    amp_total = phase_total = seen = 0
    for images, labels in adv_batches:
        a, p = count_correct(bank, model, images, labels, w_before)
        amp_total += a
        phase_total += p
        seen += len(labels)
    if seen == 0:
        raise ValueError("update_weight needs at least one adversarial example")
    ratio, w_after, skipped = apply_ratio(w_before, amp_total, phase_total, floor)
    record = WeightUpdateRecord(epoch, amp_total, phase_total, ratio, w_before, w_after, skipped)
    return w_after, record


def replay(records: Iterable[WeightUpdateRecord | dict], w0: float = 1.0,
           floor: float = WEIGHT_FLOOR) -> list[float]:
    """Recompute the weight trajectory ``[w0, w1, ...]`` from recorded counts."""
    trajectory = [w0]
    for rec in records:
        rec = rec if isinstance(rec, dict) else asdict(rec)
        _, w, _ = apply_ratio(trajectory[-1], rec["amp_correct"], rec["phase_correct"], floor)
        trajectory.append(w)
    return trajectory


def reported_weight(w: float) -> float:
    """Weights below 1e-3 are reported as 0."""
    return 0.0 if w < REPORT_ZERO_BELOW else w
