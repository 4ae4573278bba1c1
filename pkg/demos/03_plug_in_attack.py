"""Registering an outside attack and evaluating a defense against it.

Any function ``(model, images, labels, bank=None) -> adversarial images`` can
be registered by name. Here a one-step FGSM sits next to the built-in PGD.
Prompts are kept at zero, so this also shows that an empty bank is a no-op.
"""
import torch
import torch.nn.functional as F

from papdefense.attacks import register_attack, registered_attacks
from papdefense.data import load_desk_dataset
from papdefense.evaluator import evaluate
from papdefense.models import build_reference_cnn, pretrain_natural
from papdefense.prompt_bank import PromptBank

torch.set_num_threads(1)


@register_attack("fgsm")
def fgsm(model, images, labels, bank=None, epsilon=8 / 255):
    x = images.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(F.cross_entropy(model(x), labels), x)
    return (images + epsilon * grad.sign()).clamp(0, 1).detach()


print("registered attacks:", registered_attacks())
train, test, _ = load_desk_dataset()
model = pretrain_natural(build_reference_cnn((3, 28, 28), 10, seed=0), train, epochs=4)
bank = PromptBank.zeros(10, (3, 28, 28))
report = evaluate(model, bank, test.subset(slice(0, 500)), ["fgsm", "pgd_linf", "pgd_l2"])
print(report.to_json())
