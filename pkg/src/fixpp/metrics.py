"""Evaluation metrics: information gain, AUC and shuffled AUC.

Log-likelihoods are reported in bits per fixation. AUC follows the
Mann-Whitney convention with ties credited 0.5, computed by sorting and
ranking. The two saliency-map conventions are tracked explicitly: AUC maps
carry the nonparametric prior, shuffled-AUC maps a uniform prior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import FixationDataset, fixation_cells
from .featstack import FeatureStack
from .model import (
    LN2,
    DensityMap,
    SaliencyModel,
    density_log_likelihood,
    predict,
    uniform_density,
)

UNIFORM_CONVENTION = "uniform-prior"
NONPARAMETRIC_CONVENTION = "nonparametric-prior"


def information_gain(ll_model_bits: float, ll_baseline_bits: float) -> float:
    """Bits per fixation saved over the baseline on the same fixation set."""
    return ll_model_bits - ll_baseline_bits


def information_gain_explained(
    ll_model_bits: float, ll_baseline_bits: float, ll_gold_bits: float
) -> float:
    """Ratio of the model's information gain to the explainable gain."""
    denom = ll_gold_bits - ll_baseline_bits
    if denom <= 0:
        raise ValueError(
            "gold standard does not improve on the baseline "
            f"({ll_gold_bits} <= {ll_baseline_bits}); ratio undefined"
        )
    return (ll_model_bits - ll_baseline_bits) / denom


def rank_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney statistic via sort-and-rank, ties credited 0.5."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one value in each class")
    values = np.concatenate([pos, neg])
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_values = values[order]
    # average ranks over tied runs
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[: len(pos)].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def auc(
    saliency: np.ndarray,
    fixation_cells_rc: np.ndarray,
    nonfixation_cells_rc: np.ndarray | None = None,
    convention: str = NONPARAMETRIC_CONVENTION,
) -> float:
    """AUC of a saliency map as a fixation-vs-nonfixation classifier score.

    Cells are (row, col) pairs. With no explicit nonfixations, every grid
    cell counts once (the exhaustive uniform nonfixation distribution).
    The convention tag records which prior built the map; it does not
    change the computation.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    if len(fixation_cells_rc) == 0:
        raise ValueError("AUC needs at least one fixation")
    pos = saliency[fixation_cells_rc[:, 0], fixation_cells_rc[:, 1]]
    if nonfixation_cells_rc is None:
        neg = saliency.ravel()
    else:
        if len(nonfixation_cells_rc) == 0:
            raise ValueError("empty nonfixation sample")
        neg = saliency[nonfixation_cells_rc[:, 0], nonfixation_cells_rc[:, 1]]
    return rank_auc(pos, neg)


def _normalized_locations(dataset: FixationDataset, image_ids) -> dict[str, np.ndarray]:
    """Per-image (n, 2) arrays of fixation positions in normalized [0,1)^2."""
    out = {}
    for image_id in image_ids:
        w, h = dataset.image_sizes[image_id]
        fx = dataset.fixations_on(image_id)
        out[image_id] = np.array([(f.y / h, f.x / w) for f in fx]).reshape(-1, 2)
    return out


def _cells_from_normalized(norm: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    gh, gw = grid_shape
    rows = np.minimum((norm[:, 0] * gh).astype(np.intp), gh - 1)
    cols = np.minimum((norm[:, 1] * gw).astype(np.intp), gw - 1)
    return np.stack([rows, cols], axis=1)


def shuffled_auc(
    saliency_maps: dict[str, np.ndarray],
    dataset: FixationDataset,
) -> tuple[float, dict[str, float]]:
    """Per-image AUC with other images' fixation locations as nonfixations.

    Locations pool with multiplicity, carried across images in normalized
    coordinates. Maps must follow the uniform-prior convention. Returns the
    unweighted mean over images and the per-image values.
    """
    image_ids = sorted(saliency_maps)
    with_fix = [i for i in image_ids if dataset.fixations_on(i)]
    if len(with_fix) < 2:
        raise ValueError("shuffled AUC needs fixations on at least two images")
    norm = _normalized_locations(dataset, with_fix)
    per_image = {}
    for image_id in with_fix:
        smap = np.asarray(saliency_maps[image_id], dtype=np.float64)
        others = np.concatenate([norm[i] for i in with_fix if i != image_id])
        pos = _cells_from_normalized(norm[image_id], smap.shape)
        neg = _cells_from_normalized(others, smap.shape)
        per_image[image_id] = auc(smap, pos, neg, convention=UNIFORM_CONVENTION)
    aggregate = float(np.mean([per_image[i] for i in with_fix]))
    return aggregate, per_image


@dataclass
class ImageEval:
    image_id: str
    n_fixations: int
    ll_model_bits: float
    ll_baseline_bits: float
    ll_gold_bits: float | None
    auc: float | None
    sauc: float | None


@dataclass
class EvalReport:
    """Per-image and aggregate evaluation results.

    Aggregate log-likelihoods pool fixations across images; AUC-style
    numbers aggregate as unweighted image means. `conventions` records
    which prior built the maps behind each AUC column.
    """

    rows: list[ImageEval]
    conventions: dict[str, str] = field(
        default_factory=lambda: {
            "auc": NONPARAMETRIC_CONVENTION,
            "sauc": UNIFORM_CONVENTION,
        }
    )

    def _pooled(self, attr: str) -> float:
        total, n = 0.0, 0
        for r in self.rows:
            value = getattr(r, attr)
            if value is None:
                raise ValueError(f"{attr} missing for image {r.image_id!r}")
            total += value * r.n_fixations
            n += r.n_fixations
        return total / n

    @property
    def ll_model_bits(self) -> float:
        return self._pooled("ll_model_bits")

    @property
    def ll_baseline_bits(self) -> float:
        return self._pooled("ll_baseline_bits")

    @property
    def ll_gold_bits(self) -> float:
        return self._pooled("ll_gold_bits")

    @property
    def info_gain_bits(self) -> float:
        return information_gain(self.ll_model_bits, self.ll_baseline_bits)

    @property
    def info_gain_explained(self) -> float:
        return information_gain_explained(
            self.ll_model_bits, self.ll_baseline_bits, self.ll_gold_bits
        )

    def _image_mean(self, attr: str) -> float:
        values = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        if not values:
            raise ValueError(f"no per-image values for {attr}")
        return float(np.mean(values))

    @property
    def auc(self) -> float:
        return self._image_mean("auc")

    @property
    def sauc(self) -> float:
        return self._image_mean("sauc")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["image", "n_fixations", "ll_model_bits", "ll_baseline_bits",
                 "ll_gold_bits", "auc", "sauc"]
            )
            fmt = lambda v: "" if v is None else repr(v)
            for r in sorted(self.rows, key=lambda r: r.image_id):
                writer.writerow(
                    [r.image_id, r.n_fixations, repr(r.ll_model_bits),
                     repr(r.ll_baseline_bits), fmt(r.ll_gold_bits),
                     fmt(r.auc), fmt(r.sauc)]
                )
            agg = ["<aggregate>", sum(r.n_fixations for r in self.rows),
                   repr(self.ll_model_bits), repr(self.ll_baseline_bits)]
            try:
                agg.append(repr(self.ll_gold_bits))
            except ValueError:
                agg.append("")
            for attr in ("auc", "sauc"):
                try:
                    agg.append(repr(self._image_mean(attr)))
                except ValueError:
                    agg.append("")
            writer.writerow(agg)

    def summary_lines(self) -> list[str]:
        lines = [
            f"images: {len(self.rows)}",
            f"fixations: {sum(r.n_fixations for r in self.rows)}",
            f"ll_model_bits: {self.ll_model_bits:.4f}",
            f"ll_baseline_bits: {self.ll_baseline_bits:.4f}",
            f"info_gain_bits: {self.info_gain_bits:.4f}",
        ]
        try:
            lines.append(f"ll_gold_bits: {self.ll_gold_bits:.4f}")
            lines.append(f"info_gain_explained: {self.info_gain_explained:.4f}")
        except ValueError:
            pass
        for attr in ("auc", "sauc"):
            try:
                value = self._image_mean(attr)
                lines.append(
                    f"{attr}: {value:.4f} ({self.conventions[attr]} maps)"
                )
            except ValueError:
                pass
        return lines


def evaluate_model(
    model: SaliencyModel,
    stacks: dict[str, FeatureStack],
    dataset: FixationDataset,
    baseline_fn: Callable[[str], DensityMap],
    gold_fn: Callable[[str, str], DensityMap] | None = None,
    auc_prior_fn: Callable[[str], DensityMap] | None = None,
    model_prior_fn: Callable[[str], DensityMap] | None = None,
    compute_sauc: bool = True,
) -> EvalReport:
    """Score a model on every image of `dataset` that has fixations.

    `baseline_fn(image_id)` supplies the image-independent baseline density;
    `gold_fn(image_id, subject)` the subject-cross-validated gold standard;
    `auc_prior_fn(image_id)` the nonparametric prior for AUC-convention maps
    (AUC is skipped when absent). The model's own density uses
    `model_prior_fn` (defaults to the baseline, the training-time center
    bias). Shuffled AUC uses uniform-prior maps.
    """
    if model_prior_fn is None:
        model_prior_fn = baseline_fn
    rows = []
    uniform_maps = {}
    image_ids = [i for i in sorted(stacks) if dataset.fixations_on(i)]
    for image_id in image_ids:
        stack = stacks[image_id]
        size = dataset.image_sizes[image_id]
        grid = (stack.height, stack.width)
        fx = dataset.fixations_on(image_id)
        cells = fixation_cells(fx, size, grid)

        uniform = uniform_density(*grid)
        density_u = predict(model, stack, uniform)
        uniform_maps[image_id] = density_u.log_grid

        baseline = baseline_fn(image_id)
        ll_base = density_log_likelihood(baseline, fx, size) / LN2
        ll_model = density_log_likelihood(
            predict(model, stack, model_prior_fn(image_id)), fx, size
        ) / LN2

        ll_gold = None
        if gold_fn is not None:
            total = 0.0
            for f in fx:
                gold = gold_fn(image_id, f.subject)
                cell = fixation_cells([f], size, grid)
                total += float(gold.log_at(cell)[0])
            ll_gold = total / len(fx) / LN2

        auc_value = None
        if auc_prior_fn is not None:
            density_np = predict(model, stack, auc_prior_fn(image_id))
            auc_value = auc(
                density_np.log_grid, cells, None, convention=NONPARAMETRIC_CONVENTION
            )

        rows.append(
            ImageEval(
                image_id=image_id,
                n_fixations=len(fx),
                ll_model_bits=ll_model,
                ll_baseline_bits=ll_base,
                ll_gold_bits=ll_gold,
                auc=auc_value,
                sauc=None,
            )
        )

    if compute_sauc and len(uniform_maps) >= 2:
        _, per_image = shuffled_auc(uniform_maps, dataset)
        for r in rows:
            r.sauc = per_image.get(r.image_id)
    return EvalReport(rows=rows)
