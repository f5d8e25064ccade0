"""The 8-element dihedral symmetry group acting on square images.

The same orbit serves training-set expansion and test-time augmentation.
Convention (fixed so averaged predictions are reproducible everywhere):
horizontal flip is applied first, then counter-clockwise quarter-turn
rotations. Canonical enumeration is hflip in (False, True) outer, rotation
ascending inner, so ``ELEMENTS[4 * hflip + rotation // 90]``.

Operations act on the last two axes, so they work for single images
``(3, N, N)`` and batches ``(B, 3, N, N)`` alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class DihedralElement:
    hflip: bool
    rotation: int

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")


#: all 8 group elements in canonical order
ELEMENTS: tuple[DihedralElement, ...] = tuple(
    DihedralElement(hflip=flip, rotation=rot)
    for flip in (False, True)
    for rot in ROTATIONS
)

IDENTITY = ELEMENTS[0]


def _require_square(tensor: np.ndarray) -> None:
    if tensor.ndim < 2 or tensor.shape[-1] != tensor.shape[-2]:
        raise ValueError(
            f"dihedral transforms need a square image, got shape {tensor.shape}")


def apply(element: DihedralElement, tensor: np.ndarray) -> np.ndarray:
    """Apply one group element: a lossless permutation of the input pixels."""
    _require_square(tensor)
    out = tensor
    if element.hflip:
        out = np.flip(out, axis=-1)
    k = element.rotation // 90
    if k:
        out = np.rot90(out, k, axes=(-2, -1))
    return np.ascontiguousarray(out)


def orbit(tensor: np.ndarray) -> list[np.ndarray]:
    """All 8 transformed copies of ``tensor``, in canonical element order."""
    return [apply(g, tensor) for g in ELEMENTS]
