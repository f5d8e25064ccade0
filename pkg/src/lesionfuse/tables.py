"""Per-image ternary probability tables.

This is the interchange format between prediction, fusion, and evaluation:
one simplex vector (p_mm, p_sk, p_bn) per image, persisted as CSV with rows
sorted by image_id and 9 significant digits so fused results survive
re-reads bit-for-bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError

TABLE_HEADER = ("image_id", "p_mm", "p_sk", "p_bn")
SIMPLEX_ATOL = 1e-6
_RANGE_ATOL = 1e-9


def validate_probability_vector(p: np.ndarray, context: str = "") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    where = f" ({context})" if context else ""
    if p.shape != (3,):
        raise ValueError(f"probability vector must have 3 components{where}: {p!r}")
    if not np.isfinite(p).all():
        raise ValueError(f"non-finite probability vector{where}: {p.tolist()}")
    if (p < -_RANGE_ATOL).any() or (p > 1.0 + _RANGE_ATOL).any():
        raise ValueError(f"components outside [0, 1]{where}: {p.tolist()}")
    if abs(p.sum() - 1.0) > SIMPLEX_ATOL:
        raise ValueError(f"components sum to {p.sum():.9f}, not 1{where}")
    return p


@dataclass
class PredictionTable:
    source_id: str
    rows: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.rows = {
            image_id: validate_probability_vector(vec, f"{self.source_id}/{image_id}")
            for image_id, vec in self.rows.items()
        }

    @property
    def image_ids(self) -> list[str]:
        return sorted(self.rows)

    def __len__(self) -> int:
        return len(self.rows)


def write_table(table: PredictionTable, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(TABLE_HEADER)]
    for image_id in table.image_ids:
        p = table.rows[image_id]
        lines.append(f"{image_id},{p[0]:.9g},{p[1]:.9g},{p[2]:.9g}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def read_table(path: str | Path, source_id: str | None = None) -> PredictionTable:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"prediction table not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TABLE_HEADER:
            raise SchemaError(f"{path}: bad header {header!r}")
        rows: dict[str, np.ndarray] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise SchemaError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            image_id = row[0]
            if image_id in rows:
                raise SchemaError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            try:
                rows[image_id] = np.array([float(v) for v in row[1:]])
            except ValueError as err:
                raise SchemaError(f"{path}:{lineno}: {err}") from None
    return PredictionTable(source_id=source_id or path.stem, rows=rows)


class PredictionStore:
    """Directory of prediction tables keyed by source id (run ids like
    ``resnet18_r128_adam_rep1`` or fusion node ids like ``L1/resnet18/128``)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, source_id: str) -> Path:
        return self.root / f"{source_id}.csv"

    def exists(self, source_id: str) -> bool:
        return self.path_for(source_id).is_file()

    def save(self, table: PredictionTable) -> Path:
        return write_table(table, self.path_for(table.source_id))

    def load(self, source_id: str) -> PredictionTable:
        return read_table(self.path_for(source_id), source_id=source_id)

    def missing(self, source_ids) -> list[str]:
        return sorted(s for s in source_ids if not self.exists(s))
