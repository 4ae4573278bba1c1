"""Regenerate ``bank_v1/``: a 3-class 2x3x4 prompt bank written with explicit
little-endian packing, independent of the package's writer."""

import hashlib
import json
import struct
from pathlib import Path

SHAPE = (3, 2, 3, 4)
COUNT = 3 * 2 * 3 * 4


def phase_value(i):
    return (i - 36) * 0.0625


def amplitude_value(i):
    return i * 1.5 - 7.25


def main(out=Path(__file__).with_name("bank_v1")):
    out.mkdir(exist_ok=True)
    blobs = {
        "phase": struct.pack(f"<{COUNT}f", *[phase_value(i) for i in range(COUNT)]),
        "amplitude": struct.pack(f"<{COUNT}f", *[amplitude_value(i) for i in range(COUNT)]),
    }
    for name, blob in blobs.items():
        (out / f"{name}.bin").write_bytes(blob)
    manifest = {
        "format_version": 1,
        "num_classes": 3,
        "image_shape": [2, 3, 4],
        "weight": 0.3125,
        "dft_convention": "fft2/unnormalized-forward/ifft2-1/(HW)/per-channel/no-shift",
        "seed": 11,
        "config_digest": "fixture",
        "weight_trajectory": [1.0, 0.625, 0.3125],
        "checksum": {k: hashlib.sha256(v).hexdigest() for k, v in blobs.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


if __name__ == "__main__":
    main()
