"""Set algebra over pixel label masks.

Masks are flat, row-major label arrays (index = y * width + x). All
operations here are pure: they never mutate their inputs, so values can be
shared freely across threads. Empty pixel sets are legal results, not
errors; downstream losses treat them as zero contribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .losses import ProbMap

LABEL_DTYPE = np.int32
INDEX_DTYPE = np.int64


class ShapeError(ValueError):
    """Raised when two grid-shaped values do not share dimensions."""


@dataclass
class LabelMask:
    """Per-pixel class assignment on a width x height grid.

    labels is a flat array of length width * height with values in
    [0, num_classes).
    """

    width: int
    height: int
    num_classes: int
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=LABEL_DTYPE).ravel()
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        n = self.width * self.height
        if self.labels.shape[0] != n:
            raise ShapeError(
                f"labels length {self.labels.shape[0]} != width*height {n}"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("label values must lie in [0, num_classes)")

    @property
    def size(self) -> int:
        return self.width * self.height

    def grid(self) -> np.ndarray:
        """Labels reshaped to (height, width)."""
        return self.labels.reshape(self.height, self.width)

    @classmethod
    def from_grid(cls, grid: np.ndarray, num_classes: int) -> "LabelMask":
        grid = np.asarray(grid)
        h, w = grid.shape
        return cls(width=w, height=h, num_classes=num_classes, labels=grid.ravel())

    def same_shape(self, other: "LabelMask") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.num_classes == other.num_classes
        )


@dataclass
class PixelSet:
    """A set of pixel indices on a grid, stored strictly increasing."""

    indices: np.ndarray
    grid_size: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=INDEX_DTYPE).ravel()
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("pixel indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.grid_size:
                raise ValueError("pixel indices out of range")

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass
class SparseLabels:
    """Pixel indices with one class label attached to each."""

    pixels: PixelSet
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=LABEL_DTYPE).ravel()
        if self.labels.shape[0] != len(self.pixels):
            raise ShapeError("labels must align one-to-one with pixels")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("label values must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.pixels)

    @classmethod
    def from_pairs(
        cls,
        indices: np.ndarray,
        labels: np.ndarray,
        grid_size: int,
        num_classes: int,
    ) -> "SparseLabels":
        """Build from unordered (index, label) pairs; sorts by index."""
        indices = np.asarray(indices, dtype=INDEX_DTYPE).ravel()
        labels = np.asarray(labels, dtype=LABEL_DTYPE).ravel()
        order = np.argsort(indices, kind="stable")
        return cls(
            pixels=PixelSet(indices[order], grid_size),
            labels=labels[order],
            num_classes=num_classes,
        )


def _check_pair(a: LabelMask, b: LabelMask) -> None:
    if not a.same_shape(b):
        raise ShapeError(
            f"mask shapes differ: {a.width}x{a.height}/C={a.num_classes} vs "
            f"{b.width}x{b.height}/C={b.num_classes}"
        )


def separate_agreement(a: LabelMask, b: LabelMask) -> tuple[SparseLabels, PixelSet]:
    """Split the grid into pixels where two masks agree and where they differ.

    Returns (agree, disagree): agree carries the shared label per pixel; the
    two index sets partition [0, width*height).
    """
    _check_pair(a, b)
    eq = a.labels == b.labels
    agree_idx = np.flatnonzero(eq)
    disagree_idx = np.flatnonzero(~eq)
    agree = SparseLabels(
        pixels=PixelSet(agree_idx, a.size),
        labels=a.labels[agree_idx],
        num_classes=a.num_classes,
    )
    return agree, PixelSet(disagree_idx, a.size)


def argmax_mask(p: "ProbMap") -> LabelMask:
    """Hard mask from a probability map; ties go to the lowest class index."""
    labels = np.argmax(p.probs, axis=1)
    return LabelMask(
        width=p.width, height=p.height, num_classes=p.num_classes, labels=labels
    )


def consistency_set(pred_a: LabelMask, pred_b: LabelMask) -> SparseLabels:
    """Pixels where two predicted masks coincide, with the shared label."""
    agree, _ = separate_agreement(pred_a, pred_b)
    return agree


def restrict(consistent: SparseLabels, disagree: PixelSet) -> SparseLabels:
    """Entries of `consistent` whose pixel index lies in `disagree`."""
    if consistent.pixels.grid_size != disagree.grid_size:
        raise ShapeError(
            f"grid sizes differ: {consistent.pixels.grid_size} vs {disagree.grid_size}"
        )
    keep = np.isin(consistent.pixels.indices, disagree.indices, assume_unique=True)
    return SparseLabels(
        pixels=PixelSet(consistent.pixels.indices[keep], disagree.grid_size),
        labels=consistent.labels[keep],
        num_classes=consistent.num_classes,
    )


def consensus_set(masks: Sequence[LabelMask]) -> SparseLabels:
    """Pixels where every provided mask agrees, with the unanimous label.

    A single mask is unanimous everywhere, so the result is that whole mask.
    """
    if len(masks) == 0:
        raise ValueError("consensus_set needs at least one mask")
    first = masks[0]
    for m in masks[1:]:
        _check_pair(first, m)
    stacked = np.stack([m.labels for m in masks], axis=0)
    unanimous = np.all(stacked == stacked[0], axis=0)
    idx = np.flatnonzero(unanimous)
    return SparseLabels(
        pixels=PixelSet(idx, first.size),
        labels=first.labels[idx],
        num_classes=first.num_classes,
    )


def full_grid_labels(mask: LabelMask) -> SparseLabels:
    """The whole mask viewed as sparse labels over every pixel."""
    return SparseLabels(
        pixels=PixelSet(np.arange(mask.size, dtype=INDEX_DTYPE), mask.size),
        labels=mask.labels.copy(),
        num_classes=mask.num_classes,
    )
