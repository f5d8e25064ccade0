"""Dataset catalog: manifest loading, validation, and class accounting.

The catalog is a CSV contract (``image_id,file_path,label,split``) rather than
a downloader: any conforming file works, from a full dermoscopy archive export
down to a three-image synthetic fixture. Labels are the ternary lesion classes
MM (malignant melanoma), SK (seborrheic keratosis), BN (benign nevus).

Relative ``file_path`` entries are resolved against the manifest's directory;
the original strings are preserved so a canonically ordered manifest
round-trips byte-identically through :func:`write_manifest`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SchemaError

LABELS = ("MM", "SK", "BN")
SPLITS = ("train", "test")
MANIFEST_HEADER = ("image_id", "file_path", "label", "split")

#: index of each label in probability vectors and loss targets
LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}


@dataclass(frozen=True)
class ImageRecord:
    """One catalog entry. Dimensions are probed from the image header at load
    time and stay None when the file is unreadable at that point."""

    image_id: str
    file_path: str
    label: str
    split: str
    resolved_path: Path
    width_px: int | None = None
    height_px: int | None = None


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    source_path: Path | None = None

    @property
    def class_counts(self) -> dict[str, dict[str, int]]:
        """Per-split label counts, recomputed from records so they can never
        drift out of sync."""
        counts = {split: {label: 0 for label in LABELS} for split in SPLITS}
        for rec in self.records:
            counts[rec.split][rec.label] += 1
        return counts

    def split_records(self, split: str) -> list[ImageRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [rec for rec in self.records if rec.split == split]

    def split_ids(self, split: str) -> list[str]:
        return sorted(rec.image_id for rec in self.split_records(split))

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class ValidationReport:
    """Outcome of :func:`verify_dataset`. Problems are reported, not raised."""

    unreadable: list[str] = field(default_factory=list)
    wrong_channels: list[str] = field(default_factory=list)
    size_mismatch: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.unreadable or self.wrong_channels or self.size_mismatch)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "unreadable": list(self.unreadable),
            "wrong_channels": list(self.wrong_channels),
            "size_mismatch": list(self.size_mismatch),
        }


def _probe_dimensions(path: Path) -> tuple[int | None, int | None]:
    # Header-only read; full decode is deferred to verify_dataset.
    try:
        with Image.open(path) as im:
            return im.size[0], im.size[1]
    except (OSError, ValueError):
        return None, None


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a manifest CSV.

    Labels parse case-insensitively into MM/SK/BN; splits into train/test.
    Raises FileNotFoundError for a missing file and SchemaError (naming the
    offending row) for header mismatches, unknown tokens, short rows, or
    duplicate image ids. Referenced image files are *not* required to exist
    here; that is verify_dataset's job.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header "
                              f"{','.join(MANIFEST_HEADER)}") from None
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise SchemaError(
                f"{path}: bad header {header!r}, expected {','.join(MANIFEST_HEADER)}")

        records: list[ImageRecord] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise SchemaError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            image_id, file_path, label_tok, split_tok = (f.strip() for f in row)
            if not image_id:
                raise SchemaError(f"{path}:{lineno}: empty image_id")
            if image_id in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            label = label_tok.upper()
            if label not in LABELS:
                raise SchemaError(
                    f"{path}:{lineno}: unknown label {label_tok!r} "
                    f"(expected one of {', '.join(LABELS)})")
            split = split_tok.lower()
            if split not in SPLITS:
                raise SchemaError(
                    f"{path}:{lineno}: unknown split {split_tok!r} "
                    f"(expected one of {', '.join(SPLITS)})")
            rel = Path(file_path)
            resolved = rel if rel.is_absolute() else base / rel
            width, height = _probe_dimensions(resolved)
            records.append(ImageRecord(
                image_id=image_id,
                file_path=file_path,
                label=label,
                split=split,
                resolved_path=resolved,
                width_px=width,
                height_px=height,
            ))

    return DatasetManifest(records=records, source_path=path)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write the canonical form: header plus rows sorted by image_id, LF line
    endings, labels uppercase, splits lowercase, paths as originally given."""
    path = Path(path)
    lines = [",".join(MANIFEST_HEADER)]
    for rec in sorted(manifest.records, key=lambda r: r.image_id):
        lines.append(f"{rec.image_id},{rec.file_path},{rec.label},{rec.split}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def decode_image(path: Path) -> np.ndarray:
    """Decode an image file to a channel-first float64 array on the 0-255
    scale. Raises OSError/ValueError on unreadable input and ValueError when
    the decoded image is not 3-channel."""
    with Image.open(path) as im:
        im.load()
        arr = np.asarray(im)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{path}: expected 3-channel image, got shape {arr.shape}")
    return arr.transpose(2, 0, 1).astype(np.float64)


def verify_dataset(manifest: DatasetManifest) -> ValidationReport:
    """Fully decode every referenced file and report problems by image_id.

    A record lands in at most one bucket: unreadable (missing file or failed
    decode), wrong_channels (decodes but is not 3-channel), or size_mismatch
    (decoded size disagrees with the dimensions probed at load time).
    """
    report = ValidationReport()
    for rec in manifest.records:
        try:
            with Image.open(rec.resolved_path) as im:
                im.load()
                bands = len(im.getbands())
                size = im.size
        except (OSError, ValueError):
            report.unreadable.append(rec.image_id)
            continue
        if bands != 3:
            report.wrong_channels.append(rec.image_id)
            continue
        if rec.width_px is not None and size != (rec.width_px, rec.height_px):
            report.size_mismatch.append(rec.image_id)
    return report
