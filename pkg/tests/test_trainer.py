import json
from dataclasses import replace

import pytest
import torch
from torch import nn

from conftest import LinearProbe
from papdefense.attacks import LINF_TRAIN
from papdefense.data import ImageBatch
from papdefense.models import parameter_digest
from papdefense.prompt_bank import PromptBank
from papdefense.trainer import (
    ModelNotFrozenError,
    NumericError,
    TrainConfig,
    TrainConfigError,
    train_prompts,
)
from papdefense.weighting import replay

FAST = TrainConfig(epochs=5, batch_size=16, lr=0.05, weight_update_period=2,
                   attack=replace(LINF_TRAIN, steps=2), lambda2=4.0)


@pytest.fixture
def data():
    gen = torch.Generator().manual_seed(0)
    return ImageBatch(torch.rand(48, 3, 8, 8, generator=gen), torch.arange(48) % 4)


def test_rejects_unfrozen_model(data):
    model = LinearProbe()
    model.linear.weight.requires_grad_(True)
    with pytest.raises(ModelNotFrozenError):
        train_prompts(model, data, FAST)


def test_backbone_untouched_and_prompts_move(data, probe):
    before = parameter_digest(probe)
    bank, logs = train_prompts(probe, data, FAST)
    assert parameter_digest(probe) == before
    assert bank.provenance["backbone_digest"] == before
    init, _ = train_prompts(probe, data, replace(FAST, lr=0.0))
    assert not torch.equal(bank.phase_prompts, init.phase_prompts)
    assert not bank.phase_prompts.requires_grad


def test_seeded_reproducibility(data, probe):
    a, la = train_prompts(probe, data, FAST)
    b, lb = train_prompts(probe, data, FAST)
    assert a.digest() == b.digest()
    assert [l.loss for l in la] == [l.loss for l in lb]
    c, _ = train_prompts(probe, data, replace(FAST, seed=1))
    assert a.digest() != c.digest()


def test_weight_schedule_and_replay(data, probe):
    bank, logs = train_prompts(probe, data, FAST)
    fired = [l.epoch for l in logs if l.weight_record is not None]
    assert fired == [2, 4]
    trajectory = bank.provenance["weight_trajectory"]
    assert len(trajectory) == 3 and trajectory[0] == 1.0
    assert replay(bank.provenance["weight_records"])[-1] == bank.weight == trajectory[-1]
    assert logs[-1].weight == bank.weight


def test_log_file_and_provenance(data, probe, tmp_path):
    path = tmp_path / "train.jsonl"
    bank, logs = train_prompts(probe, data, FAST, log_path=path)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert [x["epoch"] for x in lines] == [1, 2, 3, 4, 5]
    assert set(lines[0]["loss"]) == {"adv", "nat", "sim", "mis", "total"}
    assert bank.provenance["config_digest"] == FAST.digest()
    assert bank.provenance["seed"] == 0


def test_zero_lambdas_reduce_to_adv_loss(data, probe):
    cfg = replace(FAST, lambda1=0.0, lambda2=0.0, lambda3=0.0, epochs=1)
    _, logs = train_prompts(probe, data, cfg)
    assert logs[0].loss["total"] == pytest.approx(logs[0].loss["adv"], rel=1e-6)


def test_lr_schedule():
    cfg = TrainConfig(lr=0.1, lr_drop_epoch=15, lr_drop_factor=10)
    assert cfg.lr_at(14) == 0.1 and cfg.lr_at(15) == pytest.approx(0.01)


def test_prompted_attack_target_runs(data, probe):
    bank, _ = train_prompts(probe, data, replace(FAST, attack_target="prompted", epochs=1))
    assert torch.isfinite(bank.phase_prompts).all()


def test_nan_raises(data):
    class NanModel(nn.Module):
        def __init__(self):
            super().__init__()
            self.inner = LinearProbe()

        def forward(self, x):
            return self.inner(x) * float("nan")

    with pytest.raises(NumericError):
        train_prompts(NanModel(), data, replace(FAST, attack=replace(LINF_TRAIN, epsilon=0.0)))


def test_config_strict_parsing():
    cfg = TrainConfig.from_dict({"epochs": 3, "attack": {"norm": "L2", "epsilon": 0.5, "steps": 5,
                                                         "step_size": 0.1}})
    assert cfg.attack.norm == "L2" and cfg.epochs == 3
    with pytest.raises(TrainConfigError, match="learning_rate"):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(TrainConfigError):
        TrainConfig(lambda2=-1.0)
    with pytest.raises(TrainConfigError):
        TrainConfig(attack_target="bank")
    assert TrainConfig().digest() == TrainConfig.from_dict(TrainConfig().to_dict()).digest()


def test_existing_bank_is_not_mutated(data, probe):
    bank = PromptBank.zeros(4, (3, 8, 8))
    trained, _ = train_prompts(probe, data, FAST, bank=bank)
    assert bank.phase_prompts.abs().sum() == 0
    assert trained.phase_prompts.abs().sum() > 0


def test_backbone_presets():
    assert TrainConfig.for_backbone("natural") == TrainConfig()
    at = TrainConfig.for_backbone("adversarial", lr=0.5)
    assert (at.lambda1, at.lambda2, at.lambda3, at.lr) == (1.0, 5000.0, 4.0, 0.5)
    with pytest.raises(TrainConfigError):
        TrainConfig.for_backbone("trades")
