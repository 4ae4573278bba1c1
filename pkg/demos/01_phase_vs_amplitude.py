"""Which spectrum carries the label once an image has been attacked?

Train a small CNN on the desk dataset, attack the test split with L-inf PGD,
then hand the model adversarial images whose phase (or amplitude) has been
put back to the clean image's. Prints the four accuracies and saves a figure
of one example.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from papdefense.attacks import LINF_TRAIN, pgd
from papdefense.data import load_desk_dataset
from papdefense.evaluator import spectrum_swap_diagnostic
from papdefense.models import build_reference_cnn, pretrain_natural
from papdefense.spectral import Spectrum, decompose, recompose, swap_spectra

torch.set_num_threads(1)
train, test, manifest = load_desk_dataset()
print("desk dataset:", manifest["splits"])

# a naturally trained backbone (about half a minute on one core)
model = pretrain_natural(build_reference_cnn((3, 28, 28), 10, seed=0), train, epochs=12)
print(f"train accuracy {model.recorded_accuracy:.3f}")

table = spectrum_swap_diagnostic(model, test, "pgd_linf")
for key in ("clean", "adv_all", "nat_phase", "nat_amplitude", "nat_both"):
    print(f"{key:>14}: {100 * table[key]:5.1f}%")

# one picture: clean, adversarial, and the two hybrids
x, y = test.images[:1], test.labels[:1]
adv = pgd(model, x, y, LINF_TRAIN)
spec = decompose(x)
panels = {
    "clean": x,
    "adversarial": adv,
    "clean phase + adv amplitude": swap_spectra(adv, x, "phase"),
    "adv phase + clean amplitude": swap_spectra(adv, x, "amplitude"),
    "phase only (unit amplitude)": recompose(Spectrum(spec.phase, torch.ones_like(spec.amplitude) * 40)),
}
fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2))
for ax, (title, img) in zip(axes, panels.items()):
    ax.imshow(img[0].clamp(0, 1).permute(1, 2, 0).numpy())
    ax.set_title(title, fontsize=8)
    ax.axis("off")
fig.tight_layout()
fig.savefig("phase_vs_amplitude.png", dpi=120)
print("saved phase_vs_amplitude.png")
