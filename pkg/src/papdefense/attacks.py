"""L-inf / L2 PGD against the raw model and the prompt-aware adaptive variant.

Attacks are plain callables ``attack(model, images, labels, bank=None)``;
external implementations (AutoAttack, C&W, ...) slot in through
:func:`register_attack` and are then addressable by name from the evaluator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Literal

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .prompt_bank import PromptBank, apply

Norm = Literal["Linf", "L2"]


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    norm: Norm = "Linf"
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float = 2 / 255
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("Linf", "L2"):
            raise AttackConfigError(f"norm must be 'Linf' or 'L2', got {self.norm!r}")
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be >= 0")
        if self.steps < 0:
            raise AttackConfigError("steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0:
            raise AttackConfigError("step_size must be > 0 when steps > 0")

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


def _flat_norm(t: Tensor) -> Tensor:
    return t.flatten(1).norm(dim=1).view(-1, *([1] * (t.dim() - 1)))


def _random_start(x0: Tensor, cfg: AttackConfig, gen: torch.Generator) -> Tensor:
    if cfg.norm == "Linf":
        return (torch.rand(x0.shape, generator=gen) * 2 - 1) * cfg.epsilon
    # uniform in the L2 ball: Gaussian direction, radius eps * U^(1/d)
    direction = torch.randn(x0.shape, generator=gen)
    direction = direction / _flat_norm(direction).clamp_min(1e-12)
    d = x0[0].numel()
    u = torch.rand((len(x0),) + (1,) * (x0.dim() - 1), generator=gen)
    return direction * cfg.epsilon * u.pow(1.0 / d)


def project(x: Tensor, x0: Tensor, cfg: AttackConfig) -> Tensor:
    """Project onto the epsilon ball around ``x0`` and then onto the [0, 1] box."""
    if cfg.norm == "Linf":
        x = torch.max(torch.min(x, x0 + cfg.epsilon), x0 - cfg.epsilon)
    else:
        delta = x - x0
        factor = (cfg.epsilon / _flat_norm(delta).clamp_min(1e-12)).clamp(max=1.0)
        x = x0 + delta * factor
    return x.clamp(0.0, 1.0)


def _ascent(forward: Callable[[Tensor], Tensor], images: Tensor, labels: Tensor,
            cfg: AttackConfig, trace: list | None = None) -> Tensor:
    x0 = images.detach()
    if cfg.epsilon == 0 or (cfg.steps == 0 and not cfg.random_start):
        return x0.clone()
    gen = torch.Generator().manual_seed(cfg.seed)
    x = project(x0 + _random_start(x0, cfg, gen), x0, cfg) if cfg.random_start else x0.clone()
    for _ in range(cfg.steps):
        x.requires_grad_(True)
        loss = F.cross_entropy(forward(x), labels, reduction="sum")
        (grad,) = torch.autograd.grad(loss, x)
        if trace is not None:
            trace.append(loss.item() / len(labels))
        if cfg.norm == "Linf":
            step = cfg.step_size * grad.sign()
        else:
            step = cfg.step_size * grad / _flat_norm(grad).clamp_min(1e-12)
        x = project(x.detach() + step, x0, cfg)
    if trace is not None:
        with torch.no_grad():
            trace.append(F.cross_entropy(forward(x), labels, reduction="sum").item() / len(labels))
    return x.detach()


def pgd(model: nn.Module, images: Tensor, labels: Tensor, config: AttackConfig,
        trace: list | None = None) -> Tensor:
    """Untargeted PGD on cross-entropy against the raw model.

    If ``trace`` is given, the mean loss before each step and after the last
    step is appended to it.
    """
    return _ascent(model, images, labels, config, trace)


def adaptive_pgd(model: nn.Module, bank: PromptBank, images: Tensor, labels: Tensor,
                 config: AttackConfig, trace: list | None = None) -> Tensor:
    """PGD through the defense: the loss is taken on the image prompted with
    its ground-truth-label prompts, so gradients pass through the DFT."""
    bank = bank.detached()
    return _ascent(lambda x: model(apply(bank, x, labels, clamp=True)), images, labels,
                   config, trace)


@dataclass(frozen=True)
class AttackSpec:
    """A named PGD attack; ``adaptive`` routes it through the prompt bank."""

    name: str
    config: AttackConfig
    adaptive: bool = False

    def __call__(self, model, images, labels, bank: PromptBank | None = None) -> Tensor:
        if self.adaptive:
            if bank is None:
                raise AttackConfigError(f"attack {self.name!r} needs a prompt bank")
            return adaptive_pgd(model, bank, images, labels, self.config)
        return pgd(model, images, labels, self.config)


AttackFn = Callable[..., Tensor]
_REGISTRY: dict[str, AttackFn] = {}


def register_attack(name: str, fn: AttackFn | None = None):
    """Register ``fn(model, images, labels, bank=None) -> adversarial images`` under ``name``.

    Usable directly or as a decorator.
    """
    def _register(f):
        _REGISTRY[name] = f
        return f

    return _register(fn) if fn is not None else _register


def get_attack(name: str) -> AttackFn:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise AttackConfigError(
            f"unknown attack {name!r}; registered: {sorted(_REGISTRY)}"
        ) from None


def registered_attacks() -> list[str]:
    return sorted(_REGISTRY)


LINF_TRAIN = AttackConfig("Linf", 8 / 255, 10, 2 / 255, True, 0)

for _spec in (
    AttackSpec("pgd_linf", LINF_TRAIN),
    AttackSpec("pgd_linf20", replace(LINF_TRAIN, steps=20)),
    # L2 stand-in for C&W / DDN
    AttackSpec("pgd_l2", AttackConfig("L2", 0.5, 50, 2.5 * 0.5 / 50, True, 0)),
    AttackSpec("adaptive_pgd20", replace(LINF_TRAIN, steps=20), adaptive=True),
    AttackSpec("adaptive_pgd40", replace(LINF_TRAIN, steps=40), adaptive=True),
):
    register_attack(_spec.name, _spec)

del _spec
