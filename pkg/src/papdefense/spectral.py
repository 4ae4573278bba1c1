"""Differentiable phase/amplitude decomposition of image batches.

Convention: unnormalized forward 2-D DFT over the last two axes, 1/(H*W)
normalized inverse, applied per channel, no fftshift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch
from torch import Tensor

DFT_CONVENTION = "fft2/unnormalized-forward/ifft2-1/(HW)/per-channel/no-shift"

SwapMode = Literal["phase", "amplitude", "both", "none"]


class SpectrumError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrum:
    """Phase (radians) and amplitude arrays of shape N x C x H x W."""

    phase: Tensor
    amplitude: Tensor

    def __post_init__(self):
        if self.phase.shape != self.amplitude.shape:
            raise SpectrumError(
                f"phase shape {tuple(self.phase.shape)} != amplitude shape "
                f"{tuple(self.amplitude.shape)}"
            )

    @property
    def shape(self) -> torch.Size:
        return self.phase.shape

    def to_complex(self) -> Tensor:
        return torch.complex(
            self.amplitude * torch.cos(self.phase),
            self.amplitude * torch.sin(self.phase),
        )


def _check_images(images: Tensor) -> None:
    if images.dim() < 2:
        raise SpectrumError(f"expected at least 2-D input, got shape {tuple(images.shape)}")
    if images.shape[-1] < 1 or images.shape[-2] < 1:
        raise SpectrumError("H and W must be >= 1")
    if torch.is_complex(images):
        raise SpectrumError("expected a real-valued image tensor")
    if not torch.isfinite(images).all():
        raise SpectrumError("images contain non-finite values")


def decompose(images: Tensor) -> Spectrum:
    """Split real images into phase and amplitude spectra.

    Phase lies in (-pi, pi]; amplitude is non-negative. Gradients flow back to
    ``images``.
    """
    _check_images(images)
    freq = torch.fft.fft2(images)
    phase = torch.angle(freq)
    # atan2 can return exactly -pi for (-x, -0.0); fold onto +pi
    phase = torch.where(phase <= -math.pi, phase + 2 * math.pi, phase)
    return Spectrum(phase=phase, amplitude=torch.abs(freq))


def recompose(spectrum: Spectrum) -> Tensor:
    """Inverse DFT of ``amplitude * exp(i * phase)``; the imaginary residue is dropped.

    No clamping is applied. Phase need not be wrapped and amplitude may be
    negative (equivalent to a pi phase shift).
    """
    if spectrum.phase.shape != spectrum.amplitude.shape:
        raise SpectrumError("phase and amplitude shapes differ")
    return torch.fft.ifft2(spectrum.to_complex()).real


def swap_spectra(adv: Tensor, nat: Tensor, which: SwapMode) -> Tensor:
    """Rebuild adversarial images with natural spectra substituted in.

    ``which`` names the spectrum taken from ``nat``: ``"phase"`` keeps the
    adversarial amplitude with the natural phase, ``"amplitude"`` the reverse,
    ``"both"`` reconstructs ``nat`` and ``"none"`` reconstructs ``adv``.
    """
    if adv.shape != nat.shape:
        raise SpectrumError(
            f"adversarial shape {tuple(adv.shape)} != natural shape {tuple(nat.shape)}"
        )
    if which not in ("phase", "amplitude", "both", "none"):
        raise SpectrumError(f"unknown swap mode {which!r}")
    a, n = decompose(adv), decompose(nat)
    phase = n.phase if which in ("phase", "both") else a.phase
    amplitude = n.amplitude if which in ("amplitude", "both") else a.amplitude
    return recompose(Spectrum(phase=phase, amplitude=amplitude))
