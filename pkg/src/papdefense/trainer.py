"""Prompt training loop against a frozen backbone."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
from torch import nn

from .attacks import LINF_TRAIN, AttackConfig, adaptive_pgd, pgd
from .data import ImageBatch
from .models import is_frozen, parameter_digest
from .objective import loss_adv, loss_all, loss_mis, loss_nat, loss_sim
from .prompt_bank import PromptBank, apply, init_from_examples
from .weighting import WeightUpdateRecord, schedule_should_update, update_weight

log = logging.getLogger(__name__)


BACKBONE_LAMBDAS = {"natural": (3.0, 400.0, 4.0), "adversarial": (1.0, 5000.0, 4.0)}


class ModelNotFrozenError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 3.0
    lambda2: float = 400.0
    lambda3: float = 4.0
    tau: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    lr_drop_epoch: int = 15
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_update_period: int = 5
    attack: AttackConfig = LINF_TRAIN
    attack_target: str = "raw"
    seed: int = 0
    clamp_in_graph: bool = False
    init_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.lr < 0:
            raise TrainConfigError("lr must be >= 0")
        if self.weight_update_period < 1:
            raise TrainConfigError("weight_update_period must be >= 1")
        if self.tau < 0:
            raise TrainConfigError("tau must be >= 0")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise TrainConfigError("lambdas must be >= 0")
        if self.attack_target not in ("raw", "prompted"):
            raise TrainConfigError("attack_target must be 'raw' or 'prompted'")
        if self.batch_size < 1 or self.lr_drop_factor <= 0:
            raise TrainConfigError("batch_size must be >= 1 and lr_drop_factor > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("attack"), dict):
            d["attack"] = AttackConfig(**d["attack"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def for_backbone(cls, kind: str, **overrides) -> "TrainConfig":
        """Loss weights recommended for a naturally or adversarially pre-trained backbone."""
        if kind not in BACKBONE_LAMBDAS:
            raise TrainConfigError(f"kind must be one of {sorted(BACKBONE_LAMBDAS)}, got {kind!r}")
        l1, l2, l3 = BACKBONE_LAMBDAS[kind]
        return cls(**{"lambda1": l1, "lambda2": l2, "lambda3": l3, **overrides})

    def lr_at(self, epoch: int) -> float:
        return self.lr / self.lr_drop_factor if epoch >= self.lr_drop_epoch else self.lr


@dataclass
class EpochLog:
    epoch: int
    loss: dict
    train_robust_accuracy: float
    weight: float
    lr: float
    wall_time: float
    weight_record: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def train_prompts(model: nn.Module, dataset: ImageBatch, config: TrainConfig = TrainConfig(),
                  bank: PromptBank | None = None, log_path=None,
                  num_classes: int | None = None) -> tuple[PromptBank, list[EpochLog]]:
    """Optimize per-class phase/amplitude prompts for a frozen ``model``.

    Each mini-batch is attacked afresh, the four losses are combined and one
    SGD-with-momentum step is taken on the prompt arrays. Every
    ``weight_update_period`` epochs the amplitude weight is rescaled from that
    epoch's adversarial batches. Epoch logs are appended as JSON lines to
    ``log_path`` when given.
    """
    if not is_frozen(model):
        raise ModelNotFrozenError("backbone has trainable parameters; call models.freeze first")
    model.eval()
    digest_before = parameter_digest(model)
    cfg = config
    num_classes = num_classes or dataset.num_classes
    if bank is None:
        bank = init_from_examples(dataset, num_classes, seed=cfg.seed)
        bank.weight = cfg.init_weight
    phase = bank.phase_prompts.detach().clone().requires_grad_(True)
    amplitude = bank.amplitude_prompts.detach().clone().requires_grad_(True)
    working = PromptBank(phase, amplitude, float(bank.weight), dict(bank.provenance))
    opt = torch.optim.SGD([phase, amplitude], lr=cfg.lr, momentum=cfg.momentum)
    mis_gen = torch.Generator().manual_seed(cfg.seed)
    trajectory = [float(working.weight)]
    records: list[WeightUpdateRecord] = []
    logs: list[EpochLog] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            lr = cfg.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            fire = schedule_should_update(epoch, cfg.weight_update_period)
            kept, sums, correct, seen = [], dict.fromkeys(("adv", "nat", "sim", "mis", "total"), 0.0), 0, 0
            for b, (x, y) in enumerate(dataset.batches(cfg.batch_size, shuffle=True,
                                                       seed=cfg.seed * 1000 + epoch)):
                atk = cfg.attack.with_seed(cfg.attack.seed + step)
                if cfg.attack_target == "raw":
                    adv = pgd(model, x, y, atk)
                else:
                    adv = adaptive_pgd(model, working, x, y, atk)
                p_adv = apply(working, adv, y, clamp=cfg.clamp_in_graph)
                p_nat = apply(working, x, y, clamp=cfg.clamp_in_graph)
                l_adv, logits = loss_adv(model, p_adv, y, return_logits=True)
                parts = loss_all(
                    l_adv,
                    loss_nat(model, p_nat, y),
                    loss_sim(p_adv, x),
                    loss_mis(model, working, adv, y, mis_gen, cfg.tau, cfg.clamp_in_graph),
                    cfg.lambda1, cfg.lambda2, cfg.lambda3,
                )
                if not torch.isfinite(parts.total):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
                opt.zero_grad()
                parts.total.backward()
                opt.step()
                for k, v in parts.as_floats().items():
                    sums[k] += v * len(y)
                correct += int((logits.argmax(1) == y).sum())
                seen += len(y)
                if fire:
                    kept.append((adv, y))
                step += 1
            record = None
            if fire:
                w, rec = update_weight(working, model, kept, epoch)
                working.weight = w
                trajectory.append(w)
                records.append(rec)
                record = rec.to_dict()
            entry = EpochLog(
                epoch=epoch,
                loss={k: v / seen for k, v in sums.items()},
                train_robust_accuracy=correct / seen,
                weight=float(working.weight),
                lr=lr,
                wall_time=time.perf_counter() - t0,
                weight_record=record,
            )
            logs.append(entry)
            log.info("epoch %d total %.4f robust %.3f w %.4g", epoch, entry.loss["total"],
                     entry.train_robust_accuracy, entry.weight)
            if log_fh:
                log_fh.write(json.dumps(entry.to_dict()) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if parameter_digest(model) != digest_before:
        raise ModelNotFrozenError("backbone parameters changed during prompt training")
    final = working.detached()
    final.provenance.update(
        seed=cfg.seed,
        config_digest=cfg.digest(),
        epochs=cfg.epochs,
        weight_trajectory=trajectory,
        weight_records=[r.to_dict() for r in records],
        backbone_digest=digest_before,
    )
    return final, logs
