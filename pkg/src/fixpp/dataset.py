"""Fixation datasets: image dimensions plus (image, subject, x, y) records.

Coordinates are in image pixels with the origin at the top-left corner;
x grows rightward, y downward. A fixation on the far edge (x == width or
y == height) is valid and clamps to the last grid cell.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Fixation:
    image_id: str
    subject: str
    x: float
    y: float


@dataclass
class FixationDataset:
    """Image geometry plus individual fixation events."""

    image_sizes: dict[str, tuple[int, int]]  # image_id -> (width, height)
    fixations: list[Fixation] = field(default_factory=list)

    def __post_init__(self):
        for f in self.fixations:
            self._check(f)

    def _check(self, f: Fixation) -> None:
        if f.image_id not in self.image_sizes:
            raise KeyError(f"fixation references unknown image {f.image_id!r}")
        w, h = self.image_sizes[f.image_id]
        if not (0.0 <= f.x <= w and 0.0 <= f.y <= h):
            raise ValueError(
                f"fixation ({f.x}, {f.y}) outside image {f.image_id!r} "
                f"bounds {w}x{h}"
            )

    @property
    def image_ids(self) -> list[str]:
        return sorted(self.image_sizes)

    def subjects(self) -> list[str]:
        return sorted({f.subject for f in self.fixations})

    def fixations_on(self, image_id: str) -> list[Fixation]:
        return [f for f in self.fixations if f.image_id == image_id]

    def filter(
        self,
        images: Iterable[str] | None = None,
        subjects: Iterable[str] | None = None,
    ) -> "FixationDataset":
        """Restrict to the given images and/or subjects (None keeps all)."""
        image_set = set(images) if images is not None else set(self.image_sizes)
        subject_set = set(subjects) if subjects is not None else None
        fixations = [
            f
            for f in self.fixations
            if f.image_id in image_set
            and (subject_set is None or f.subject in subject_set)
        ]
        sizes = {i: self.image_sizes[i] for i in image_set}
        return FixationDataset(image_sizes=sizes, fixations=fixations)

    def n_fixations(self) -> int:
        return len(self.fixations)


def fixation_cell(
    x: float, y: float, image_size: tuple[int, int], grid_shape: tuple[int, int]
) -> tuple[int, int]:
    """Map a pixel coordinate to its grid cell (row, col).

    Floor division by the image-to-grid scale; coordinates on the far edge
    clamp to the last cell.
    """
    w, h = image_size
    gh, gw = grid_shape
    if not (0.0 <= x <= w and 0.0 <= y <= h):
        raise ValueError(f"coordinate ({x}, {y}) outside image bounds {w}x{h}")
    col = min(int(np.floor(x * gw / w)), gw - 1)
    row = min(int(np.floor(y * gh / h)), gh - 1)
    return row, col


def fixation_cells(
    fixations: Sequence[Fixation],
    image_size: tuple[int, int],
    grid_shape: tuple[int, int],
) -> np.ndarray:
    """(n, 2) array of (row, col) cells for fixations on one image."""
    out = np.empty((len(fixations), 2), dtype=np.intp)
    for i, f in enumerate(fixations):
        out[i] = fixation_cell(f.x, f.y, image_size, grid_shape)
    return out


def count_map(
    fixations: Sequence[Fixation],
    image_size: tuple[int, int],
    grid_shape: tuple[int, int],
) -> np.ndarray:
    """Per-cell fixation counts on the grid, as float64."""
    counts = np.zeros(grid_shape, dtype=np.float64)
    for f in fixations:
        row, col = fixation_cell(f.x, f.y, image_size, grid_shape)
        counts[row, col] += 1.0
    return counts


CSV_COLUMNS = ["image", "width", "height", "subject", "x", "y"]


def read_fixation_csv(path) -> FixationDataset:
    """Load a dataset from CSV with columns image,width,height,subject,x,y.

    Image dimensions must be consistent across rows of the same image.
    Rows with an empty subject/x/y register the image without a fixation.
    """
    sizes: dict[str, tuple[int, int]] = {}
    fixations: list[Fixation] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"fixation CSV missing columns: {missing}")
        for row in reader:
            image_id = row["image"]
            size = (int(row["width"]), int(row["height"]))
            if image_id in sizes and sizes[image_id] != size:
                raise ValueError(f"inconsistent dimensions for image {image_id!r}")
            sizes[image_id] = size
            if row["x"] == "" and row["y"] == "":
                continue
            fixations.append(
                Fixation(
                    image_id=image_id,
                    subject=row["subject"],
                    x=float(row["x"]),
                    y=float(row["y"]),
                )
            )
    return FixationDataset(image_sizes=sizes, fixations=fixations)


def write_fixation_csv(dataset: FixationDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        seen = set()
        for f in dataset.fixations:
            w, h = dataset.image_sizes[f.image_id]
            writer.writerow([f.image_id, w, h, f.subject, repr(f.x), repr(f.y)])
            seen.add(f.image_id)
        for image_id in dataset.image_ids:
            if image_id not in seen:
                w, h = dataset.image_sizes[image_id]
                writer.writerow([image_id, w, h, "", "", ""])
