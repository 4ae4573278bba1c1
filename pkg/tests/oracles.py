"""Independent reference computations used as test oracles.

Nothing here imports the package; every routine is a direct, slow
transcription of the definition.
"""

import cmath
import math

import numpy as np


def naive_dft2(img: np.ndarray) -> np.ndarray:
    """Direct O((HW)^2) 2-D DFT of a single H x W channel, in complex128."""
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for m in range(h):
                for n in range(w):
                    acc += float(img[m, n]) * cmath.exp(-2j * math.pi * (u * m / h + v * n / w))
            out[u, v] = acc
    return out


def naive_idft2(freq: np.ndarray) -> np.ndarray:
    h, w = freq.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for m in range(h):
        for n in range(w):
            acc = 0j
            for u in range(h):
                for v in range(w):
                    acc += freq[u, v] * cmath.exp(2j * math.pi * (u * m / h + v * n / w))
            out[m, n] = acc / (h * w)
    return out


def naive_prompt(img: np.ndarray, phase_prompt: np.ndarray, amp_prompt: np.ndarray,
                 weight: float) -> np.ndarray:
    """Prompt one channel by explicit spectrum arithmetic, without clamping."""
    f = naive_dft2(img)
    amp = np.abs(f) + weight * amp_prompt
    pha = np.angle(f) + phase_prompt
    return naive_idft2(amp * np.exp(1j * pha)).real


def loop_exp_abs_mean(a: np.ndarray, b: np.ndarray) -> float:
    total, count = 0.0, 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += math.exp(abs(x - y))
        count += 1
    return total / count


def loop_cross_entropy(logits, labels) -> float:
    total = 0.0
    for row, y in zip(logits, labels):
        mx = max(row)
        lse = mx + math.log(sum(math.exp(z - mx) for z in row))
        total += lse - row[y]
    return total / len(labels)


def central_difference(f, x: np.ndarray, idx, h: float = 1e-3) -> float:
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)
