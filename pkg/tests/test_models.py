import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from oracles import central_difference
from papdefense.attacks import LINF_TRAIN
from papdefense.data import ImageBatch
from papdefense.models import (
    CheckpointError,
    accuracy,
    build_reference_cnn,
    is_frozen,
    load_checkpoint,
    parameter_digest,
    pretrain_adversarial,
    pretrain_natural,
    save_checkpoint,
)


def tiny_data(n=96, seed=0):
    gen = torch.Generator().manual_seed(seed)
    y = torch.arange(n) % 3
    x = torch.rand(n, 3, 16, 16, generator=gen) * 0.5
    x[:, 0] += 0.25 * y[:, None, None]  # class signal in the red channel
    return ImageBatch(x.clamp(0, 1), y)


def test_seeded_build_and_shape():
    a, b = build_reference_cnn((3, 28, 28), 10, seed=3), build_reference_cnn((3, 28, 28), 10, seed=3)
    assert parameter_digest(a) == parameter_digest(b)
    assert parameter_digest(a) != parameter_digest(build_reference_cnn((3, 28, 28), 10, seed=4))
    assert a(torch.rand(7, 3, 28, 28)).shape == (7, 10)
    assert 5e4 < sum(p.numel() for p in a.parameters()) < 2e5


def test_eval_mode_deterministic():
    model = build_reference_cnn((3, 16, 16), 3)
    x = torch.rand(4, 3, 16, 16)
    assert torch.equal(model(x), model(x))


def test_input_gradient_matches_finite_differences():
    model = build_reference_cnn((3, 16, 16), 3, seed=1).double()
    x0 = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    x = x0.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(model(x).sum(), x)

    def f(arr):
        return model(torch.from_numpy(arr)).sum().item()

    rng = np.random.default_rng(0)
    coords = [tuple(int(rng.integers(0, s)) for s in x0.shape) for _ in range(40)]
    good = 0
    for idx in coords:
        fd = central_difference(f, x0.numpy(), idx, h=1e-6)
        good += abs(grad[idx].item() - fd) <= 1e-3 * max(abs(fd), 1e-6)
    assert good / len(coords) >= 0.95


def test_zero_epochs_keep_digest():
    model = build_reference_cnn((3, 16, 16), 3)
    before = parameter_digest(model)
    out = pretrain_natural(model, tiny_data(), epochs=0)
    assert parameter_digest(out) == before and is_frozen(out)


def test_natural_training_improves():
    data = tiny_data()
    model = build_reference_cnn((3, 16, 16), 3)
    before = accuracy(model, data.images, data.labels)
    out = pretrain_natural(model, data, epochs=6, lr=3e-3)
    assert out.recorded_accuracy >= before
    assert out.recorded_accuracy > 0.6
    assert is_frozen(out)


def test_eps_zero_adversarial_equals_natural():
    data = tiny_data(48)
    nat = pretrain_natural(build_reference_cnn((3, 16, 16), 3), data, epochs=1)
    adv = pretrain_adversarial(build_reference_cnn((3, 16, 16), 3), data,
                               replace(LINF_TRAIN, epsilon=0.0), epochs=1)
    assert parameter_digest(nat) == parameter_digest(adv)


def test_checkpoint_round_trip_is_little_endian(tmp_path):
    model = build_reference_cnn((3, 16, 16), 3, seed=5)
    model.recorded_accuracy = 0.5
    path = save_checkpoint(model, tmp_path / "ckpt", extra={"seed": 5})
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["arch"] == "ref-cnn-v1" and manifest["seed"] == 5
    first = manifest["params"][0]
    raw = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f4",
                        count=int(np.prod(first["shape"])))
    assert np.array_equal(raw, model.state_dict()[first["name"]].numpy().ravel())
    loaded = load_checkpoint(path)
    assert parameter_digest(loaded) == parameter_digest(model)
    assert loaded.recorded_accuracy == 0.5 and is_frozen(loaded)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        load_checkpoint(tmp_path / "nowhere")
    path = save_checkpoint(build_reference_cnn((3, 16, 16), 3), tmp_path / "ckpt")
    blob = bytearray((path / "params.bin").read_bytes())
    blob[0] ^= 0x40
    (path / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path)
