"""Nonparametric reference densities: center-bias priors and gold standards.

The histogram prior is the training-time center bias (fitted on fixations
from all other images, normalized coordinates). The KDE prior lives in a
normalized 100x100 frame and serves as the nonparametric prior for
AUC-convention saliency maps. The gold standard is a per-image KDE
cross-validated between subjects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Fixation, FixationDataset
from .model import DensityMap

KDE_FRAME = 100.0  # normalized frame for the cross-image KDE prior


@dataclass
class HistogramPrior:
    """B x B fixation histogram over normalized [0,1)^2 coordinates."""

    counts: np.ndarray  # (B, B), raw counts, row = y bin
    smoothing: float  # additive pseudo-count per bin
    excluded_image: str | None = None

    def __post_init__(self):
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive so every cell stays > 0")
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("counts must be a square B x B array")

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    def render(self, height: int, width: int) -> DensityMap:
        """Piecewise-constant density on an arbitrary grid."""
        if height < 1 or width < 1:
            raise ValueError("grid dimensions must be >= 1")
        b = self.bins
        smoothed = self.counts + self.smoothing
        ys = np.minimum(((np.arange(height) + 0.5) / height * b).astype(int), b - 1)
        xs = np.minimum(((np.arange(width) + 0.5) / width * b).astype(int), b - 1)
        return DensityMap.from_grid(smoothed[np.ix_(ys, xs)])


def _norm_bin(value: float, extent: float, bins: int) -> int:
    return min(int(value / extent * bins), bins - 1)


def fit_histogram_prior(
    dataset: FixationDataset,
    bins: int = 32,
    smoothing: float = 0.1,
    exclude: str | None = None,
) -> HistogramPrior:
    """Fit the center-bias histogram on all fixations except those on `exclude`."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts = np.zeros((bins, bins))
    n = 0
    for f in dataset.fixations:
        if f.image_id == exclude:
            continue
        w, h = dataset.image_sizes[f.image_id]
        counts[_norm_bin(f.y, h, bins), _norm_bin(f.x, w, bins)] += 1.0
        n += 1
    if n == 0:
        raise ValueError("no fixations left after exclusion")
    return HistogramPrior(counts=counts, smoothing=smoothing, excluded_image=exclude)


def _kde_log_density(
    points: np.ndarray,
    bandwidth: float,
    grid_shape: tuple[int, int],
    frame: tuple[float, float],
) -> np.ndarray:
    """Log of an (unnormalized) Gaussian kernel sum at grid cell centers.

    `points` is (n, 2) as (y, x) in frame coordinates; the grid's cell
    centers are mapped into the same frame. Accumulated in log space, in
    chunks, so tiny bandwidths never underflow to -inf.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    height, width = grid_shape
    fy, fx = frame
    cy = (np.arange(height) + 0.5) * (fy / height)
    cx = (np.arange(width) + 0.5) * (fx / width)
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    out = np.full(grid_shape, -np.inf)
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    for start in range(0, len(points), 512):
        chunk = points[start : start + 512]
        d2 = (gy[..., None] - chunk[:, 0]) ** 2 + (gx[..., None] - chunk[:, 1]) ** 2
        m = (-d2 * inv).max(axis=-1)
        s = np.exp(-d2 * inv - m[..., None]).sum(axis=-1)
        out = np.logaddexp(out, m + np.log(s))
    return out


@dataclass
class KdePrior:
    """Gaussian KDE over fixations pooled in the normalized 100x100 frame."""

    points: np.ndarray  # (n, 2) as (y, x) in [0, 100)^2
    bandwidth: float  # in normalized frame units

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if len(self.points) == 0:
            raise ValueError("KDE prior needs at least one fixation")

    def render(self, height: int, width: int) -> DensityMap:
        """Rescale the frame density onto the image grid and renormalize."""
        log_density = _kde_log_density(
            self.points, self.bandwidth, (height, width), (KDE_FRAME, KDE_FRAME)
        )
        return DensityMap.from_log(log_density)


def fit_kde_prior(dataset: FixationDataset, bandwidth: float) -> KdePrior:
    points = np.array(
        [
            (
                f.y * KDE_FRAME / dataset.image_sizes[f.image_id][1],
                f.x * KDE_FRAME / dataset.image_sizes[f.image_id][0],
            )
            for f in dataset.fixations
        ]
    )
    return KdePrior(points=points, bandwidth=bandwidth)


def render_prior(prior, height: int, width: int) -> DensityMap:
    """Evaluate a HistogramPrior or KdePrior on an H x W grid."""
    return prior.render(height, width)


def _grid_points(
    fixations: Sequence[Fixation],
    image_size: tuple[int, int],
    grid_shape: tuple[int, int],
) -> np.ndarray:
    w, h = image_size
    gh, gw = grid_shape
    return np.array([(f.y * gh / h, f.x * gw / w) for f in fixations])


def fit_gold_standard(
    dataset: FixationDataset,
    image_id: str,
    held_out_subject: str | None,
    bandwidth: float,
    grid_shape: tuple[int, int],
) -> DensityMap:
    """Per-image KDE over the remaining subjects' fixations.

    Bandwidth is in grid cells. The held-out subject's fixations never
    enter the estimate.
    """
    fixations = [
        f
        for f in dataset.fixations_on(image_id)
        if f.subject != held_out_subject
    ]
    if not fixations:
        raise ValueError(
            f"no fixations left on {image_id!r} after holding out "
            f"{held_out_subject!r}"
        )
    points = _grid_points(fixations, dataset.image_sizes[image_id], grid_shape)
    log_density = _kde_log_density(
        points, bandwidth, grid_shape, (float(grid_shape[0]), float(grid_shape[1]))
    )
    return DensityMap.from_log(log_density)


def select_bandwidth(
    dataset: FixationDataset,
    candidates: Sequence[float],
    grid_shape: tuple[int, int],
) -> float:
    """Pick the candidate maximizing mean leave-one-subject-out log-likelihood.

    Every (image, subject) pair with fixations from at least one other
    subject contributes; ties break toward the larger bandwidth.
    """
    from .dataset import fixation_cells

    if len(candidates) == 0:
        raise ValueError("empty candidate grid")
    if len(dataset.subjects()) < 2:
        raise ValueError("bandwidth selection needs at least two subjects")

    pairs = []
    for image_id in dataset.image_ids:
        on_image = dataset.fixations_on(image_id)
        subjects_here = sorted({f.subject for f in on_image})
        for s in subjects_here:
            if len(subjects_here) < 2:
                continue
            held = [f for f in on_image if f.subject == s]
            cells = fixation_cells(held, dataset.image_sizes[image_id], grid_shape)
            pairs.append((image_id, s, cells))
    if not pairs:
        raise ValueError("no image has fixations from two subjects")

    best_bw, best_score = None, -np.inf
    for bw in sorted(candidates):
        total, n = 0.0, 0
        for image_id, s, cells in pairs:
            gold = fit_gold_standard(dataset, image_id, s, bw, grid_shape)
            total += float(gold.log_at(cells).sum())
            n += len(cells)
        score = total / n
        if score >= best_score:  # ties go to the larger bandwidth
            best_bw, best_score = bw, score
    return float(best_bw)
