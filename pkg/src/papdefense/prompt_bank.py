"""Per-class phase and amplitude prompts plus the amplitude weight.

A bank holds two dense ``c x C x H x W`` arrays. Prompting an image ``x`` with
the prompts of class ``y`` gives

    real(IDFT((phase(x) + P[y]) paired with (amplitude(x) + w * A[y])))

optionally clamped into [0, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor, nn

from .spectral import DFT_CONVENTION, Spectrum, decompose, recompose

FORMAT_VERSION = 1


class PromptBankError(ValueError):
    pass


@dataclass
class PromptBank:
    phase_prompts: Tensor
    amplitude_prompts: Tensor
    weight: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase_prompts.shape != self.amplitude_prompts.shape:
            raise PromptBankError("phase and amplitude prompts must share a shape")
        if self.phase_prompts.dim() != 4:
            raise PromptBankError("prompts must be c x C x H x W")
        if not self.weight >= 0:
            raise PromptBankError(f"weight must be non-negative, got {self.weight}")

    @property
    def num_classes(self) -> int:
        return self.phase_prompts.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.phase_prompts.shape[1:])

    @classmethod
    def zeros(cls, num_classes: int, image_shape, weight: float = 1.0) -> "PromptBank":
        shape = (num_classes, *image_shape)
        return cls(torch.zeros(shape), torch.zeros(shape), weight)

    def detached(self) -> "PromptBank":
        return PromptBank(
            self.phase_prompts.detach().clone(),
            self.amplitude_prompts.detach().clone(),
            float(self.weight),
            dict(self.provenance),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(_le_bytes(self.phase_prompts))
        h.update(_le_bytes(self.amplitude_prompts))
        h.update(np.float64(self.weight).tobytes())
        return h.hexdigest()


def init_from_examples(dataset, num_classes: int, seed: int = 0) -> PromptBank:
    """Seed each class's prompts with the spectra of one random example of that class."""
    labels = dataset.labels.numpy()
    rng = np.random.default_rng(seed)
    picks = []
    for cls in range(num_classes):
        members = np.flatnonzero(labels == cls)
        if len(members) == 0:
            raise PromptBankError(f"class {cls} has no examples to initialize its prompts")
        picks.append(int(rng.choice(members)))
    spec = decompose(dataset.images[picks])
    return PromptBank(
        spec.phase.clone(),
        spec.amplitude.clone(),
        weight=1.0,
        provenance={"seed": seed, "init_indices": picks, "weight_trajectory": [1.0]},
    )


def _check_labels(bank: PromptBank, images: Tensor, labels: Tensor) -> None:
    if tuple(images.shape[1:]) != bank.image_shape:
        raise PromptBankError(
            f"image shape {tuple(images.shape[1:])} does not match bank {bank.image_shape}"
        )
    if len(labels) != len(images):
        raise PromptBankError("labels and images are not aligned")
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= bank.num_classes):
        raise PromptBankError(f"labels must lie in [0, {bank.num_classes})")


def apply_parts(
    bank: PromptBank,
    images: Tensor,
    labels: Tensor,
    use_phase: bool = True,
    use_amplitude: bool = True,
    weight: float | Tensor | None = None,
    clamp: bool = True,
) -> Tensor:
    """Prompt ``images`` with the class-``labels`` prompts, optionally one spectrum only."""
    _check_labels(bank, images, labels)
    spec = decompose(images)
    phase, amplitude = spec.phase, spec.amplitude
    if use_phase:
        phase = phase + bank.phase_prompts[labels]
    if use_amplitude:
        w = bank.weight if weight is None else weight
        amplitude = amplitude + w * bank.amplitude_prompts[labels]
    out = recompose(Spectrum(phase, amplitude))
    return out.clamp(0.0, 1.0) if clamp else out


def apply(bank: PromptBank, images: Tensor, labels: Tensor, clamp: bool = True) -> Tensor:
    """Prompt with both spectra at the bank's weight; differentiable in prompts and images."""
    return apply_parts(bank, images, labels, clamp=clamp)


class PromptedPrediction(NamedTuple):
    prompted: Tensor
    selected: Tensor
    logits: Tensor


def apply_test(bank: PromptBank, images: Tensor, model: nn.Module) -> PromptedPrediction:
    """Select prompts by the raw model's prediction, then classify the prompted image.

    Exactly two model calls: one on the raw batch to pick prompts, one on the
    prompted batch for the final logits. Ties go to the lowest class index.
    """
    with torch.no_grad():
        selected = model(images).argmax(dim=1)
    prompted = apply(bank, images, selected, clamp=True)
    with torch.no_grad():
        logits = model(prompted)
    return PromptedPrediction(prompted, selected, logits)


def _le_bytes(t: Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().astype("<f4").tobytes()


def save(bank: PromptBank, path) -> Path:
    """Write ``manifest.json``, ``phase.bin`` and ``amplitude.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {"phase": _le_bytes(bank.phase_prompts), "amplitude": _le_bytes(bank.amplitude_prompts)}
    for name, blob in blobs.items():
        (path / f"{name}.bin").write_bytes(blob)
    prov = bank.provenance
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_classes": bank.num_classes,
        "image_shape": list(bank.image_shape),
        "weight": float(bank.weight),
        "dft_convention": DFT_CONVENTION,
        "seed": prov.get("seed"),
        "config_digest": prov.get("config_digest"),
        "weight_trajectory": [float(w) for w in prov.get("weight_trajectory", [bank.weight])],
        "checksum": {name: hashlib.sha256(blob).hexdigest() for name, blob in blobs.items()},
    }
    extra = {k: v for k, v in prov.items() if k not in manifest}
    if extra:
        manifest["provenance"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load(path) -> PromptBank:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(mpath)
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise PromptBankError(f"unsupported format_version {manifest.get('format_version')!r}")
    shape = (int(manifest["num_classes"]), *[int(s) for s in manifest["image_shape"]])
    arrays = {}
    for name in ("phase", "amplitude"):
        blob = (path / f"{name}.bin").read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest["checksum"][name]:
            raise PromptBankError(f"{name}.bin checksum mismatch")
        if len(blob) != 4 * int(np.prod(shape)):
            raise PromptBankError(
                f"{name}.bin holds {len(blob) // 4} floats, manifest implies shape {shape}"
            )
        arr = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape)
        arrays[name] = torch.from_numpy(arr)
    provenance = dict(manifest.get("provenance", {}))
    for key in ("seed", "config_digest", "weight_trajectory"):
        provenance[key] = manifest.get(key)
    return PromptBank(arrays["phase"], arrays["amplitude"], float(manifest["weight"]), provenance)
