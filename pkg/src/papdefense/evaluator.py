"""Robust-accuracy evaluation, test-time prompt selection and the spectrum-swap diagnostic."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import torch
from torch import Tensor, nn

from .attacks import AttackConfigError, AttackSpec, get_attack
from .data import ImageBatch
from .models import parameter_digest
from .prompt_bank import PromptBank, apply, apply_test
from .spectral import swap_spectra

STRATEGIES = ("predicted_label", "traversal", "oracle_label", "random_label", "none")


class EvalConfigError(ValueError):
    pass


class _Counter(nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return self.inner(x)


class TraversalResult(NamedTuple):
    predictions: Tensor
    prompted: Tensor
    scores: Tensor


@torch.no_grad()
def traversal_select(model: nn.Module, bank: PromptBank, images: Tensor) -> TraversalResult:
    """Prompt with every class in turn and keep the class whose own logit is largest.

    ``scores[:, i]`` is logit ``i`` of the class-``i``-prompted image (raw, no
    softmax). Ties go to the lowest index. Exactly ``c`` forward passes.
    """
    n, c = len(images), bank.num_classes
    scores = images.new_empty(n, c)
    prompted = []
    for i in range(c):
        p = apply(bank, images, torch.full((n,), i, dtype=torch.long))
        scores[:, i] = model(p)[:, i]
        prompted.append(p)
    pred = scores.argmax(1)
    stacked = torch.stack(prompted, dim=1)
    return TraversalResult(pred, stacked[torch.arange(n), pred], scores)


@torch.no_grad()
def predict(model: nn.Module, bank: PromptBank | None, images: Tensor, strategy: str,
            labels: Tensor | None = None, generator: torch.Generator | None = None) -> Tensor:
    """Predicted labels under one of :data:`STRATEGIES`."""
    if strategy == "none":
        return model(images).argmax(1)
    if bank is None:
        raise EvalConfigError(f"strategy {strategy!r} needs a prompt bank")
    if strategy == "predicted_label":
        return apply_test(bank, images, model).logits.argmax(1)
    if strategy == "traversal":
        return traversal_select(model, bank, images).predictions
    if strategy == "oracle_label":
        if labels is None:
            raise EvalConfigError("oracle_label needs ground-truth labels")
        return model(apply(bank, images, labels)).argmax(1)
    if strategy == "random_label":
        chosen = torch.randint(0, bank.num_classes, (len(images),), generator=generator)
        return model(apply(bank, images, chosen)).argmax(1)
    raise EvalConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


@dataclass
class EvalReport:
    natural_accuracy: float
    robust_accuracy: dict[str, float]
    selection_strategy: str
    model_calls_per_image: int
    weight_used: float
    timing: dict[str, float]
    dataset_digest: str
    num_examples: int
    backbone_digest: str
    bank_digest: str | None = None
    seed: int = 0
    config_digest: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _resolve_attacks(attacks) -> list[tuple[str, Callable]]:
    resolved = []
    for a in attacks or ():
        if isinstance(a, str):
            resolved.append((a, get_attack(a)))
        elif callable(a):
            resolved.append((getattr(a, "name", getattr(a, "__name__", repr(a))), a))
        else:
            raise AttackConfigError(f"cannot interpret attack {a!r}")
    names = [n for n, _ in resolved]
    if len(set(names)) != len(names):
        raise AttackConfigError(f"duplicate attack names: {names}")
    return resolved


def seeded_for_batch(fn, b):
    """Shift an :class:`AttackSpec`'s seed by the batch index; other callables pass through."""
    # vary the random start across batches while staying deterministic
    if isinstance(fn, AttackSpec):
        return replace(fn, config=fn.config.with_seed(fn.config.seed + b))
    return fn


def evaluate(model: nn.Module, bank: PromptBank | None, dataset: ImageBatch,
             attacks: Sequence[str | Callable] = ("pgd_linf",),
             strategy: str = "predicted_label", batch_size: int = 250, seed: int = 0,
             config_digest: str | None = None) -> EvalReport:
    """Natural and per-attack robust accuracy of ``model`` defended by ``bank``.

    Adversarial examples come from each attack as given (standard attacks see
    the raw model, adaptive ones see the bank). Prediction then goes through
    ``strategy``. ``model_calls_per_image`` counts the forward passes a single
    prediction costs, attacks excluded.
    """
    if strategy not in STRATEGIES:
        raise EvalConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy != "none" and bank is None:
        raise EvalConfigError(f"strategy {strategy!r} needs a prompt bank")
    resolved = _resolve_attacks(attacks)
    model.eval()
    digest = parameter_digest(model)
    counter = _Counter(model)
    gen = torch.Generator().manual_seed(seed)
    correct = {"natural": 0, **{name: 0 for name, _ in resolved}}
    timing = dict.fromkeys(correct, 0.0)
    calls = set()
    t_start = time.perf_counter()
    for b, (x, y) in enumerate(dataset.batches(batch_size)):
        t0 = time.perf_counter()
        counter.calls = 0
        correct["natural"] += int((predict(counter, bank, x, strategy, y, gen) == y).sum())
        calls.add(counter.calls)
        timing["natural"] += time.perf_counter() - t0
        for name, fn in resolved:
            t0 = time.perf_counter()
            adv = seeded_for_batch(fn, b)(model, x, y, bank=bank)
            correct[name] += int((predict(model, bank, adv, strategy, y, gen) == y).sum())
            timing[name] += time.perf_counter() - t0
    timing["total"] = time.perf_counter() - t_start
    if len(calls) != 1:
        raise RuntimeError(f"inconsistent model calls per batch: {sorted(calls)}")
    if parameter_digest(model) != digest:
        raise RuntimeError("backbone parameters changed during evaluation")
    n = len(dataset)
    return EvalReport(
        natural_accuracy=correct["natural"] / n,
        robust_accuracy={name: correct[name] / n for name, _ in resolved},
        selection_strategy=strategy,
        model_calls_per_image=calls.pop(),
        weight_used=float(bank.weight) if bank is not None and strategy != "none" else 0.0,
        timing=timing,
        dataset_digest=dataset.digest(),
        num_examples=n,
        backbone_digest=digest,
        bank_digest=bank.digest() if bank is not None else None,
        seed=seed,
        config_digest=config_digest,
    )


SWAP_COLUMNS = {"adv_all": "none", "nat_phase": "phase", "nat_amplitude": "amplitude", "nat_both": "both"}


@torch.no_grad()
def _count(model, x, y):
    return int((model(x).argmax(1) == y).sum())


def spectrum_swap_diagnostic(model: nn.Module, dataset: ImageBatch, attack="pgd_linf",
                             batch_size: int = 250) -> dict[str, float]:
    """Raw-model accuracy on adversarial images whose phase, amplitude or both
    spectra are replaced by the natural image's.

    Columns: ``adv_all`` (untouched adversarial), ``nat_phase`` (natural phase,
    adversarial amplitude), ``nat_amplitude``, ``nat_both`` and ``clean``.
    """
    (name, fn), = _resolve_attacks([attack])
    model.eval()
    hits = dict.fromkeys([*SWAP_COLUMNS, "clean"], 0)
    for b, (x, y) in enumerate(dataset.batches(batch_size)):
        adv = seeded_for_batch(fn, b)(model, x, y, bank=None)
        for col, which in SWAP_COLUMNS.items():
            hits[col] += _count(model, swap_spectra(adv, x, which).clamp(0, 1), y)
        hits["clean"] += _count(model, x, y)
    out = {k: v / len(dataset) for k, v in hits.items()}
    out["attack"] = name
    return out


def write_plots(report: EvalReport, out_dir, weight_trajectory: Sequence[float] | None = None
                ) -> list[Path]:
    """Accuracy bar chart and (optionally) the weight trajectory, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    names = ["natural", *report.robust_accuracy]
    values = [report.natural_accuracy, *report.robust_accuracy.values()]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
    ax.bar(names, [100 * v for v in values], color="#4c72b0")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(f"strategy: {report.selection_strategy}")
    fig.tight_layout()
    path = out_dir / "accuracy.svg"
    fig.savefig(path, format="svg")
    plt.close(fig)
    written.append(path)
    if weight_trajectory:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(range(len(weight_trajectory)), weight_trajectory, marker="o")
        ax.set_xlabel("update")
        ax.set_ylabel("amplitude weight w")
        fig.tight_layout()
        path = out_dir / "weight_trajectory.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    return written
