"""Bundled synthetic dataset: separable colored shapes standing in for
lesion classes, so the whole pipeline can run at desk scale.

Each class pairs a shape with a hue (MM: red disk, SK: green square,
BN: blue triangle) drawn on a noisy gray background. Image sizes vary
slightly around the nominal edge so the aspect-distorting resize path is
exercised. Generation is fully deterministic for a given seed.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from .catalog import LABELS, load_manifest, write_manifest, DatasetManifest, ImageRecord

_CLASS_COLORS = {"MM": (205, 60, 60), "SK": (60, 190, 70), "BN": (60, 80, 205)}


def _draw_shape(label: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    img = rng.integers(95, 135, size=(height, width, 3)).astype(np.float64)
    img += rng.normal(0.0, 6.0, size=img.shape)

    margin = 0.3
    cy = rng.uniform(margin, 1 - margin) * height
    cx = rng.uniform(margin, 1 - margin) * width
    radius = rng.uniform(0.16, 0.24) * min(height, width)
    yy, xx = np.mgrid[0:height, 0:width]

    if label == "MM":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    elif label == "SK":
        mask = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    else:
        # upward triangle: widens linearly from apex to base
        dy = yy - (cy - radius)
        mask = (dy >= 0) & (dy <= 2 * radius) & (np.abs(xx - cx) <= dy * 0.6)

    color = np.array(_CLASS_COLORS[label], dtype=np.float64)
    jitter = rng.normal(0.0, 8.0, size=3)
    img[mask] = color + jitter + rng.normal(0.0, 4.0, size=(int(mask.sum()), 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_dataset(root: str | Path, *, train_per_class: int = 15,
                     test_per_class: int = 7, image_size: int = 96,
                     seed: int = 7) -> Path:
    """Write images plus a manifest CSV under ``root``; returns the manifest
    path. Idempotent in content: same arguments produce the same bytes."""
    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    records = []
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        for label in LABELS:
            for i in range(per_class):
                image_id = f"{label.lower()}_{split}_{i:03d}"
                height = image_size
                width = int(image_size * rng.uniform(0.85, 1.2))
                pixels = _draw_shape(label, height, width, rng)
                rel = f"images/{image_id}.png"
                Image.fromarray(pixels, mode="RGB").save(root / rel)
                records.append(ImageRecord(
                    image_id=image_id, file_path=rel, label=label, split=split,
                    resolved_path=root / rel, width_px=width, height_px=height))

    manifest_path = root / "manifest.csv"
    write_manifest(DatasetManifest(records=records), manifest_path)
    return manifest_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate the bundled synthetic dataset")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--train-per-class", type=int, default=15)
    parser.add_argument("--test-per-class", type=int, default=7)
    parser.add_argument("--image-size", type=int, default=96)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    manifest = generate_dataset(
        args.out, train_per_class=args.train_per_class,
        test_per_class=args.test_per_class, image_size=args.image_size, seed=args.seed)
    counts = load_manifest(manifest).class_counts
    print(f"wrote {manifest} (train {counts['train']}, test {counts['test']})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
