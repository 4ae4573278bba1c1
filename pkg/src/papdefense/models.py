"""Classifier contract, the reference CNN and backbone pre-training.

Any ``nn.Module`` mapping N x C x H x W images in [0, 1] to N x c logits is
accepted by the rest of the package. A model is *frozen* when none of its
parameters require gradients; prompt training refuses anything else.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attacks import pgd
from .data import ImageBatch

log = logging.getLogger(__name__)

REFERENCE_ARCH = "ref-cnn-v1"


class CheckpointError(ValueError):
    pass


class ReferenceCNN(nn.Module):
    """conv-relu-pool x3 followed by a two-layer dense head (about 1e5 parameters)."""

    arch_id = REFERENCE_ARCH

    def __init__(self, input_shape=(3, 28, 28), num_classes=10, width=(32, 64, 64), hidden=64):
        super().__init__()
        c, h, w = input_shape
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        layers = []
        for out in width:
            layers += [nn.Conv2d(c, out, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c, h, w = out, h // 2, w // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(c * h * w, hidden), nn.ReLU(), nn.Linear(hidden, num_classes)
        )

    def forward(self, x):
        return self.head(self.features(x))


def build_reference_cnn(input_shape=(3, 28, 28), num_classes=10, seed=0) -> ReferenceCNN:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ReferenceCNN(input_shape, num_classes)
    return model.eval()


def parameter_digest(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def is_frozen(model: nn.Module) -> bool:
    return not any(p.requires_grad for p in model.parameters())


def unfreeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(True)
    return model


@torch.no_grad()
def accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch_size=500) -> float:
    correct = 0
    for start in range(0, len(labels), batch_size):
        logits = model(images[start:start + batch_size])
        correct += int((logits.argmax(1) == labels[start:start + batch_size]).sum())
    return correct / max(len(labels), 1)


def _fit(model, dataset: ImageBatch, epochs, lr, seed, batch_size, attack=None):
    unfreeze(model)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    step = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for epoch in range(epochs):
            for x, y in dataset.batches(batch_size, shuffle=True, seed=seed * 1000 + epoch):
                if attack is not None:
                    model.eval()
                    x = pgd(model, x, y, attack.with_seed(attack.seed + step))
                model.train()
                loss = F.cross_entropy(model(x), y)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
            log.info("pretrain epoch %d loss %.4f", epoch + 1, loss.item())
    freeze(model)
    model.recorded_accuracy = accuracy(model, dataset.images, dataset.labels)
    return model


def pretrain_natural(model, dataset: ImageBatch, epochs=12, lr=1e-3, seed=0, batch_size=64):
    """Plain cross-entropy training with Adam; returns the model frozen."""
    return _fit(model, dataset, epochs, lr, seed, batch_size)


def pretrain_adversarial(model, dataset: ImageBatch, attack, epochs=12, lr=1e-3, seed=0,
                         batch_size=64):
    """PGD adversarial training: every batch is replaced by its PGD counterpart."""
    return _fit(model, dataset, epochs, lr, seed, batch_size, attack=attack)


def save_checkpoint(model: nn.Module, path, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus ``params.bin`` (little-endian float32 blobs)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / "params.bin", "wb") as fh:
        for name, tensor in model.state_dict().items():
            blob = tensor.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
            fh.write(blob)
            entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
            offset += len(blob)
    manifest = {
        "format_version": 1,
        "arch": getattr(model, "arch_id", type(model).__name__),
        "input_shape": list(getattr(model, "input_shape", [])),
        "num_classes": getattr(model, "num_classes", None),
        "digest": parameter_digest(model),
        "accuracy": getattr(model, "recorded_accuracy", None),
        "params": entries,
        **(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_checkpoint(path) -> ReferenceCNN:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(mpath)
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("arch") != REFERENCE_ARCH:
        raise CheckpointError(f"unsupported architecture {manifest.get('arch')!r}")
    model = ReferenceCNN(tuple(manifest["input_shape"]), manifest["num_classes"])
    raw = (path / "params.bin").read_bytes()
    state = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))
    model.load_state_dict(state)
    freeze(model)
    if parameter_digest(model) != manifest["digest"]:
        raise CheckpointError(f"{path}: parameter digest mismatch")
    model.recorded_accuracy = manifest.get("accuracy")
    return model
