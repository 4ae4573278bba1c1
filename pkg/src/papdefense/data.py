"""Labeled image batches and the desk-scale dataset protocol.

The desk dataset composites the 5000-digit MNIST subset bundled with
``mlxtend`` onto colour patches cut from the photographs bundled with
``scikit-image``: a low-contrast digit is alpha-blended over a textured
background, in the style of MNIST-M. Everything is generated from public,
offline sources with a fixed seed, and each split carries a SHA-256 checksum
so runs are comparable.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import Tensor

DESK_PHOTOS = (
    "astronaut",
    "coffee",
    "chelsea",
    "rocket",
    "hubble_deep_field",
    "immunohistochemistry",
    "retina",
)
DESK_SIZE = 28
DESK_CONTRAST = (0.3, 0.6)
DESK_TEST_SIZE = 1000


class DataError(ValueError):
    pass


@dataclass
class ImageBatch:
    """Images in [0, 1] (N x C x H x W, float32) with integer class labels."""

    images: Tensor
    labels: Tensor

    def __post_init__(self):
        if self.images.dim() != 4:
            raise DataError(f"images must be N x C x H x W, got {tuple(self.images.shape)}")
        if self.labels.dim() != 1 or len(self.labels) != len(self.images):
            raise DataError("labels must be a 1-D tensor aligned with images")
        self.images = self.images.to(torch.float32)
        self.labels = self.labels.to(torch.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, index) -> "ImageBatch":
        return ImageBatch(self.images[index], self.labels[index])

    def batches(
        self, batch_size: int, shuffle: bool = False, seed: int | None = None
    ) -> Iterator[tuple[Tensor, Tensor]]:
        if shuffle:
            gen = torch.Generator().manual_seed(0 if seed is None else seed)
            order = torch.randperm(len(self), generator=gen)
        else:
            order = torch.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.contiguous().numpy().astype("<f4").tobytes())
        h.update(self.labels.numpy().astype("<i8").tobytes())
        return h.hexdigest()


def _photo_bank() -> list[np.ndarray]:
    import skimage.data

    return [
        getattr(skimage.data, name)()[..., :3].astype(np.float32) / 255.0
        for name in DESK_PHOTOS
    ]


def composite_digits(
    digits: np.ndarray, photos: list[np.ndarray], seed: int, contrast=DESK_CONTRAST
) -> np.ndarray:
    """Blend grayscale digits (N x H x W in [0, 1]) onto random photo patches.

    The stroke colour is the complement of the patch mean, and the blend
    strength is drawn uniformly from ``contrast`` per image.
    """
    rng = np.random.default_rng(seed)
    n, h, w = digits.shape
    out = np.empty((n, 3, h, w), dtype=np.float32)
    for i, digit in enumerate(digits):
        photo = photos[rng.integers(len(photos))]
        r = rng.integers(photo.shape[0] - h)
        c = rng.integers(photo.shape[1] - w)
        patch = photo[r:r + h, c:c + w]
        stroke = 1.0 - patch.mean(axis=(0, 1))
        alpha = (rng.uniform(*contrast) * digit)[..., None]
        out[i] = (patch * (1 - alpha) + stroke * alpha).transpose(2, 0, 1)
    return np.clip(out, 0.0, 1.0)


@functools.lru_cache(maxsize=4)
def _desk_arrays(seed: int) -> tuple[np.ndarray, np.ndarray]:
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    digits = (x / 255.0).reshape(-1, DESK_SIZE, DESK_SIZE).astype(np.float32)
    return composite_digits(digits, _photo_bank(), seed), y.astype(np.int64)


def load_desk_dataset(seed: int = 0, test_size: int = DESK_TEST_SIZE):
    """Return ``(train, test, manifest)`` for the desk protocol.

    The split is a seeded permutation of the 5000 composited images.
    """
    images, labels = _desk_arrays(seed)
    order = np.random.default_rng(seed).permutation(len(labels))
    test_idx, train_idx = order[:test_size], order[test_size:]
    train = ImageBatch(torch.from_numpy(images[train_idx]), torch.from_numpy(labels[train_idx]))
    test = ImageBatch(torch.from_numpy(images[test_idx]), torch.from_numpy(labels[test_idx]))
    manifest = {
        "name": "desk-digits-on-photos",
        "source": "mlxtend.data.mnist_data (5000 MNIST digits) + skimage.data photos",
        "photos": list(DESK_PHOTOS),
        "contrast": list(DESK_CONTRAST),
        "seed": seed,
        "image_shape": list(train.image_shape),
        "num_classes": 10,
        "splits": {
            "train": {"size": len(train), "sha256": train.digest()},
            "test": {"size": len(test), "sha256": test.digest()},
        },
    }
    return train, test, manifest


def load_npz(path: str | Path) -> ImageBatch:
    """Load an external split stored as ``images`` (N x C x H x W) and ``labels``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with np.load(path) as z:
        if "images" not in z or "labels" not in z:
            raise DataError(f"{path} must contain 'images' and 'labels' arrays")
        images = z["images"].astype(np.float32)
        labels = z["labels"].astype(np.int64)
    if images.max() > 1.0 + 1e-6 or images.min() < -1e-6:
        raise DataError(f"{path}: images must be normalized into [0, 1]")
    return ImageBatch(torch.from_numpy(images), torch.from_numpy(labels))
