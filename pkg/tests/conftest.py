import numpy as np
import pytest
from PIL import Image

from lesionfuse.catalog import load_manifest


def write_png(path, pixels):
    """pixels: (H, W, 3) uint8 array."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)
    return path


def random_png(path, rng, height=24, width=24):
    return write_png(path, rng.integers(0, 256, size=(height, width, 3)))


def make_manifest_csv(path, rows, header="image_id,file_path,label,split"):
    path.write_text("\n".join([header, *rows]) + ("\n" if rows else "\n"))
    return path


@pytest.fixture
def tiny_dataset(tmp_path):
    """Six real images (one per class and split) plus a canonical manifest."""
    rng = np.random.default_rng(0)
    rows = []
    for label in ("MM", "SK", "BN"):
        for split in ("train", "test"):
            image_id = f"{label.lower()}_{split}"
            rel = f"images/{image_id}.png"
            random_png(tmp_path / rel, rng, height=20, width=26)
            rows.append(f"{image_id},{rel},{label},{split}")
    manifest_path = make_manifest_csv(tmp_path / "manifest.csv", sorted(rows))
    return load_manifest(manifest_path)
