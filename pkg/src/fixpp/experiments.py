"""Experiment harness: leave-one-subject-out training, layer-subset and
regularization sweeps, and dataset splitting.

Every quantity a fold model is fitted on excludes the held-out subject,
including the training-time center bias, so fold models are bitwise
independent of that subject's fixations. Reported ensemble predictions
average fold densities in density space.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import yaml

from . import densities as dn
from .dataset import Fixation, FixationDataset
from .featstack import FeatureStack, NormalizationStats, compute_norm_stats, normalize
from .metrics import LN2, information_gain_explained, shuffled_auc
from .model import (
    DensityMap,
    SaliencyModel,
    build_training_data,
    cost_and_gradient,
    density_log_likelihood,
    predict,
    save_model,
    uniform_density,
)
from .optimizer import OptimizerConfig, OptTrace, initialize_params, minimize

FILTER_KINDS = ("all", "from-depth-up", "up-to-depth", "exactly-depth",
                "by-type", "groups")


@dataclass(frozen=True)
class FeatureFilter:
    """Selects features by group: depth-based families, type, or explicit list."""

    kind: str = "all"
    depth: int | None = None
    type_tag: str | None = None
    groups: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")

    @property
    def name(self) -> str:
        if self.kind == "all":
            return "all"
        if self.kind == "by-type":
            return f"type={self.type_tag}"
        if self.kind == "groups":
            return "groups=" + ",".join(self.groups or ())
        return f"{self.kind}={self.depth}"

    def select(
        self,
        meta: Sequence,
        group_info: dict[str, tuple[int, str]] | None = None,
    ) -> list[str]:
        """Feature names passing the filter; at least one must be non-degenerate."""
        present = {m.group for m in meta}
        if self.kind == "all":
            keep = present
        elif self.kind == "groups":
            unknown = set(self.groups or ()) - present
            if unknown:
                raise ValueError(f"unknown groups in filter: {sorted(unknown)}")
            keep = set(self.groups or ())
        else:
            if group_info is None:
                raise ValueError(f"filter {self.name!r} needs group depth/type tags")
            missing = present - set(group_info)
            if missing:
                raise ValueError(f"groups without depth/type tags: {sorted(missing)}")
            if self.kind == "from-depth-up":
                keep = {g for g in present if group_info[g][0] >= self.depth}
            elif self.kind == "up-to-depth":
                keep = {g for g in present if group_info[g][0] <= self.depth}
            elif self.kind == "exactly-depth":
                keep = {g for g in present if group_info[g][0] == self.depth}
            else:  # by-type
                keep = {g for g in present if group_info[g][1] == self.type_tag}
        names = [m.name for m in meta if m.group in keep]
        if not any(not m.degenerate for m in meta if m.group in keep):
            raise ValueError(f"filter {self.name!r} selects no usable feature")
        return names

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.depth is not None:
            out["depth"] = self.depth
        if self.type_tag is not None:
            out["type"] = self.type_tag
        if self.groups is not None:
            out["groups"] = list(self.groups)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureFilter":
        return cls(
            kind=doc.get("kind", "all"),
            depth=doc.get("depth"),
            type_tag=doc.get("type"),
            groups=tuple(doc["groups"]) if "groups" in doc else None,
        )


@dataclass(frozen=True)
class Split:
    train_images: tuple[str, ...]
    test_images: tuple[str, ...]
    train_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train_images) & set(self.test_images)
        if overlap:
            raise ValueError(f"train/test images overlap: {sorted(overlap)[:5]}")


def make_split(
    dataset: FixationDataset,
    policy: str,
    *,
    width: int | None = None,
    height: int | None = None,
    seed: int | None = None,
    train_images: Sequence[str] | None = None,
    test_images: Sequence[str] | None = None,
    train_subjects: Sequence[str] | None = None,
    test_subjects: Sequence[str] | None = None,
) -> Split:
    """Deterministic train/test image split.

    by-size keeps only images of exactly (width, height) for training;
    random-half shuffles with the seed and halves; explicit takes the lists
    as given. Subjects default to all subjects on both sides.
    """
    ids = dataset.image_ids
    if policy == "by-size":
        if width is None or height is None:
            raise ValueError("by-size needs width and height")
        train = [i for i in ids if dataset.image_sizes[i] == (width, height)]
        test = [i for i in ids if i not in set(train)]
    elif policy == "random-half":
        if seed is None:
            raise ValueError("random-half needs a seed")
        rng = np.random.default_rng(seed)
        order = list(ids)
        rng.shuffle(order)
        half = len(order) // 2
        train, test = sorted(order[:half]), sorted(order[half:])
    elif policy == "explicit":
        train = list(train_images or [])
        test = list(test_images or [])
    else:
        raise ValueError(f"unknown split policy {policy!r}")
    if not train:
        raise ValueError("empty train split")
    subjects = dataset.subjects()
    return Split(
        train_images=tuple(sorted(train)),
        test_images=tuple(sorted(test)),
        train_subjects=tuple(sorted(train_subjects or subjects)),
        test_subjects=tuple(sorted(test_subjects or subjects)),
    )


@dataclass
class ExperimentPlan:
    split: Split
    feature_filter: FeatureFilter = FeatureFilter()
    lambda_grid: tuple[float, ...] = (0.001,)
    seed: int = 0
    histogram_bins: int = 32
    histogram_smoothing: float = 0.1
    gold_bandwidth: float | None = None
    gold_bandwidth_candidates: tuple[float, ...] = (1.0, 2.0, 4.0)
    group_info: dict[str, tuple[int, str]] | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if not self.lambda_grid:
            raise ValueError("lambda grid must be nonempty")
        if any(l < 0 for l in self.lambda_grid):
            raise ValueError("lambda values must be nonnegative")
        if len(self.split.train_subjects) < 2:
            raise ValueError("cross-validated training needs >= 2 train subjects")

    def to_dict(self) -> dict:
        doc = {
            "split": {
                "train_images": list(self.split.train_images),
                "test_images": list(self.split.test_images),
                "train_subjects": list(self.split.train_subjects),
                "test_subjects": list(self.split.test_subjects),
            },
            "feature_filter": self.feature_filter.to_dict(),
            "lambda_grid": [float(l) for l in self.lambda_grid],
            "seed": self.seed,
            "histogram_bins": self.histogram_bins,
            "histogram_smoothing": self.histogram_smoothing,
            "gold_bandwidth": self.gold_bandwidth,
            "gold_bandwidth_candidates": list(self.gold_bandwidth_candidates),
            "optimizer": {
                "max_iterations": self.optimizer.max_iterations,
                "gradient_tolerance": self.optimizer.gradient_tolerance,
                "history_size": self.optimizer.history_size,
                "minibatch_count": self.optimizer.minibatch_count,
                "seed": self.optimizer.seed,
            },
        }
        if self.group_info is not None:
            doc["group_info"] = {
                g: {"depth": d, "type": t} for g, (d, t) in self.group_info.items()
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentPlan":
        s = doc["split"]
        split = Split(
            train_images=tuple(s["train_images"]),
            test_images=tuple(s.get("test_images", [])),
            train_subjects=tuple(s["train_subjects"]),
            test_subjects=tuple(s.get("test_subjects", s["train_subjects"])),
        )
        opt = doc.get("optimizer", {})
        group_info = None
        if "group_info" in doc:
            group_info = {
                g: (int(v["depth"]), v["type"]) for g, v in doc["group_info"].items()
            }
        return cls(
            split=split,
            feature_filter=FeatureFilter.from_dict(doc.get("feature_filter", {})),
            lambda_grid=tuple(doc.get("lambda_grid", [0.001])),
            seed=int(doc.get("seed", 0)),
            histogram_bins=int(doc.get("histogram_bins", 32)),
            histogram_smoothing=float(doc.get("histogram_smoothing", 0.1)),
            gold_bandwidth=doc.get("gold_bandwidth"),
            gold_bandwidth_candidates=tuple(
                doc.get("gold_bandwidth_candidates", [1.0, 2.0, 4.0])
            ),
            group_info=group_info,
            optimizer=OptimizerConfig(
                max_iterations=int(opt.get("max_iterations", 500)),
                gradient_tolerance=float(opt.get("gradient_tolerance", 1e-6)),
                history_size=int(opt.get("history_size", 20)),
                minibatch_count=int(opt.get("minibatch_count", 1)),
                seed=int(opt.get("seed", 0)),
            ),
        )


def load_plan(path) -> ExperimentPlan:
    with open(path) as fh:
        return ExperimentPlan.from_dict(yaml.safe_load(fh))


def save_plan(plan: ExperimentPlan, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(plan.to_dict(), fh, sort_keys=False)


@dataclass
class CellResult:
    """One (filter, lambda, held-out subject) fit and its train-image scores."""

    model: SaliencyModel
    trace: OptTrace
    ll_train_bits: float
    ll_heldout_bits: float
    ig_explained_train: float
    ig_explained_heldout: float


@dataclass
class EnsembleResult:
    sauc_train: float
    sauc_test: float | None


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    feature_names: list[str]
    stats: NormalizationStats
    gold_bandwidth: float
    cells: dict[tuple[str, float, str], CellResult]
    ensembles: dict[tuple[str, float], EnsembleResult]

    def surface_rows(self) -> list[dict]:
        """Long-format rows: one per cell per surface, plus ensemble rows."""
        rows = []
        for (fname, lam, held), cell in sorted(self.cells.items()):
            for surface, value in [
                ("ll_train_bits", cell.ll_train_bits),
                ("ll_heldout_bits", cell.ll_heldout_bits),
                ("ig_explained_train", cell.ig_explained_train),
                ("ig_explained_heldout", cell.ig_explained_heldout),
            ]:
                rows.append(
                    {"filter": fname, "lambda": lam, "held_out": held,
                     "surface": surface, "value": value}
                )
        for (fname, lam), ens in sorted(self.ensembles.items()):
            rows.append(
                {"filter": fname, "lambda": lam, "held_out": "",
                 "surface": "sauc_train", "value": ens.sauc_train}
            )
            if ens.sauc_test is not None:
                rows.append(
                    {"filter": fname, "lambda": lam, "held_out": "",
                     "surface": "sauc_test", "value": ens.sauc_test}
                )
        return rows

    def mean_heldout_ll(self, lam: float) -> float:
        values = [
            c.ll_heldout_bits for (f, l, s), c in self.cells.items() if l == lam
        ]
        return float(np.mean(values))


def fit_model(
    norm_stacks: dict[str, FeatureStack],
    dataset: FixationDataset,
    fixations: Sequence[Fixation],
    priors: dict[str, DensityMap],
    lam: float,
    stats: NormalizationStats,
    config: OptimizerConfig,
    seed: int,
    split_desc: str = "",
) -> tuple[SaliencyModel, OptTrace]:
    """Fit one model on normalized stacks; degenerate weights stay pinned at 0."""
    data = build_training_data(norm_stacks, dataset, fixations, priors)
    some_stack = norm_stacks[data.terms[0].image_id]
    meta = some_stack.feature_meta
    pin = np.array([m.degenerate for m in meta])
    params = initialize_params(data.n_features, data.grid_shape[1], seed)
    params[: data.n_features][pin] = 0.0

    if config.minibatch_count > 1:
        groups = np.array_split(np.arange(len(data.terms)), config.minibatch_count)
        n_batches = len([g for g in groups if len(g)])
        cost_fn = []
        for g in groups:
            if not len(g):
                continue
            batch = replace(data, terms=[data.terms[i] for i in g])
            cost_fn.append(
                lambda p, b=batch, scale=1.0 / n_batches: _batch_cost(
                    p, b, lam, pin, scale
                )
            )
        config = replace(config, minibatch_count=n_batches)
    else:
        cost_fn = lambda p: cost_and_gradient(p, data, lam, pin_mask=pin)
    solution, trace = minimize(cost_fn, params, config)

    weights = solution[: data.n_features].copy()
    weights[pin] = 0.0
    model = SaliencyModel(
        weights=weights,
        blur_sigma=float(np.exp(solution[-2])),
        center_weight=float(solution[-1]),
        stats=stats,
        feature_meta=list(meta),
        lambda_used=lam,
        training_split=split_desc,
    )
    return model, trace


def _batch_cost(params, batch, lam, pin, reg_scale):
    """Per-batch objective; the penalty is split so batch totals sum to the cost."""
    out = cost_and_gradient(params, batch, lam * reg_scale, pin_mask=pin)
    return out


def _loio_priors(
    train_ds: FixationDataset,
    image_ids: Sequence[str],
    grid_shape: tuple[int, int],
    bins: int,
    smoothing: float,
) -> dict[str, DensityMap]:
    """Leave-one-image-out histogram center bias for each listed image."""
    return {
        i: dn.fit_histogram_prior(train_ds, bins, smoothing, exclude=i).render(
            *grid_shape
        )
        for i in image_ids
    }


def run_cv_training(
    plan: ExperimentPlan,
    stacks: dict[str, FeatureStack],
    dataset: FixationDataset,
    center_priors: dict[str, DensityMap] | None = None,
) -> ExperimentResult:
    """Leave-one-subject-out training over the plan's grid of lambdas.

    Per fold, everything the model sees (fixations and center bias) excludes
    the held-out subject. Evaluation reports, per cell, pooled-bits surfaces
    on train images for fit subjects and the held-out subject; per
    (filter, lambda), shuffled AUC of the fold-ensemble uniform-prior maps
    on train and test images.

    The training-time center bias defaults to per-fold leave-one-image-out
    histograms; `center_priors` substitutes explicit per-image densities
    (fixation-independent, e.g. a synthetic generator's own prior).
    """
    split = plan.split
    feature_names = plan.feature_filter.select(
        stacks[split.train_images[0]].feature_meta, plan.group_info
    )
    sub = {
        i: stacks[i].select(feature_names)
        for i in (*split.train_images, *split.test_images)
        if i in stacks
    }
    train_stacks = [sub[i] for i in split.train_images]
    stats = compute_norm_stats(train_stacks)
    norm = {i: normalize(s, stats) for i, s in sub.items()}
    grid_shape = (train_stacks[0].height, train_stacks[0].width)

    train_ds = dataset.filter(images=split.train_images, subjects=split.train_subjects)
    if train_ds.n_fixations() == 0:
        raise ValueError("no training fixations in the split")

    # evaluation-side reference models (all train subjects)
    baseline_priors = _loio_priors(
        train_ds, split.train_images, grid_shape,
        plan.histogram_bins, plan.histogram_smoothing,
    )
    gold_bw = plan.gold_bandwidth
    if gold_bw is None:
        gold_bw = dn.select_bandwidth(
            train_ds, plan.gold_bandwidth_candidates, grid_shape
        )
    gold_cache: dict[tuple[str, str], DensityMap] = {}

    def gold(image_id: str, subject: str) -> DensityMap:
        key = (image_id, subject)
        if key not in gold_cache:
            gold_cache[key] = dn.fit_gold_standard(
                train_ds, image_id, subject, gold_bw, grid_shape
            )
        return gold_cache[key]

    folds = list(split.train_subjects)
    cells: dict[tuple[str, float, str], CellResult] = {}
    ensembles: dict[tuple[str, float], EnsembleResult] = {}
    fname = plan.feature_filter.name

    for lam in plan.lambda_grid:
        fold_models = {}
        for fold_index, held in enumerate(folds):
            fit_subjects = [s for s in folds if s != held]
            fold_ds = train_ds.filter(subjects=fit_subjects)
            if fold_ds.n_fixations() == 0:
                raise ValueError(f"fold holding out {held!r} has no training fixations")
            if center_priors is not None:
                fold_priors = center_priors
            else:
                fold_priors = _loio_priors(
                    fold_ds, split.train_images, grid_shape,
                    plan.histogram_bins, plan.histogram_smoothing,
                )
            model, trace = fit_model(
                norm, fold_ds, fold_ds.fixations, fold_priors, lam, stats,
                plan.optimizer, plan.seed + fold_index,
                split_desc=f"train_images={len(split.train_images)} "
                f"fit_subjects={len(fit_subjects)} held_out={held}",
            )
            fold_models[held] = (model, fold_priors)

            ll_tr, base_tr, gold_tr = _pooled_surface(
                model, sub, train_ds.filter(subjects=fit_subjects),
                fold_priors, baseline_priors, gold,
            )
            heldout_ds = train_ds.filter(subjects=[held])
            if heldout_ds.n_fixations() > 0:
                ll_ho, base_ho, gold_ho = _pooled_surface(
                    model, sub, heldout_ds, fold_priors, baseline_priors, gold
                )
                ig_ho = _ig_explained_or_nan(ll_ho, base_ho, gold_ho)
            else:
                ll_ho, ig_ho = float("nan"), float("nan")
            cells[(fname, lam, held)] = CellResult(
                model=model,
                trace=trace,
                ll_train_bits=ll_tr,
                ll_heldout_bits=ll_ho,
                ig_explained_train=_ig_explained_or_nan(ll_tr, base_tr, gold_tr),
                ig_explained_heldout=ig_ho,
            )

        models_only = [fold_models[h][0] for h in folds]
        sauc_train = _ensemble_sauc(
            models_only, sub, train_ds, split.train_images
        )
        test_ds = dataset.filter(images=split.test_images, subjects=split.test_subjects)
        sauc_test = None
        test_with_fix = [i for i in split.test_images if test_ds.fixations_on(i) and i in sub]
        if len(test_with_fix) >= 2:
            sauc_test = _ensemble_sauc(models_only, sub, test_ds, test_with_fix)
        ensembles[(fname, lam)] = EnsembleResult(
            sauc_train=sauc_train, sauc_test=sauc_test
        )

    return ExperimentResult(
        plan=plan,
        feature_names=feature_names,
        stats=stats,
        gold_bandwidth=gold_bw,
        cells=cells,
        ensembles=ensembles,
    )


def _ig_explained_or_nan(ll_model, ll_baseline, ll_gold) -> float:
    """Surface value for a fold; undefined ratios become NaN, not run failures."""
    try:
        return information_gain_explained(ll_model, ll_baseline, ll_gold)
    except ValueError:
        return float("nan")


def _pooled_surface(model, sub_stacks, eval_ds, model_priors, baseline_priors, gold_fn):
    """Pooled bits/fixation for model, baseline and gold on one fixation set."""
    from .dataset import fixation_cells

    total_model = total_base = total_gold = 0.0
    n = 0
    for image_id in eval_ds.image_ids:
        fx = eval_ds.fixations_on(image_id)
        if not fx:
            continue
        stack = sub_stacks[image_id]
        size = eval_ds.image_sizes[image_id]
        density = predict(model, stack, model_priors[image_id])
        total_model += density_log_likelihood(density, fx, size) * len(fx)
        total_base += density_log_likelihood(
            baseline_priors[image_id], fx, size
        ) * len(fx)
        for f in fx:
            cell = fixation_cells([f], size, density.shape)
            total_gold += float(gold_fn(image_id, f.subject).log_at(cell)[0])
        n += len(fx)
    if n == 0:
        raise ValueError("no fixations to evaluate")
    return total_model / n / LN2, total_base / n / LN2, total_gold / n / LN2


def ensemble_density(
    models: Sequence[SaliencyModel], stack: FeatureStack, prior: DensityMap
) -> DensityMap:
    """Mean of fold densities, in density space."""
    grid = np.mean([predict(m, stack, prior).grid for m in models], axis=0)
    return DensityMap.from_grid(grid)


def _ensemble_sauc(models, sub_stacks, eval_ds, image_ids) -> float:
    maps = {}
    for image_id in image_ids:
        if not eval_ds.fixations_on(image_id):
            continue
        stack = sub_stacks[image_id]
        uniform = uniform_density(stack.height, stack.width)
        maps[image_id] = ensemble_density(models, stack, uniform).log_grid
    aggregate, _ = shuffled_auc(maps, eval_ds)
    return aggregate


def run_lambda_sweep(
    plan: ExperimentPlan,
    stacks: dict[str, FeatureStack],
    dataset: FixationDataset,
    center_priors: dict[str, DensityMap] | None = None,
) -> tuple[ExperimentResult, float]:
    """Run the grid and select the lambda with the best held-out likelihood.

    Ties break toward the larger lambda (more sparsity).
    """
    result = run_cv_training(plan, stacks, dataset, center_priors=center_priors)
    best_lam, best_score = None, -np.inf
    for lam in sorted(plan.lambda_grid):
        score = result.mean_heldout_ll(lam)
        if score >= best_score:
            best_lam, best_score = lam, score
    return result, float(best_lam)


def run_layer_subsets(
    plan: ExperimentPlan,
    stacks: dict[str, FeatureStack],
    dataset: FixationDataset,
    group_info: dict[str, tuple[int, str]] | None = None,
) -> dict[str, ExperimentResult]:
    """The four layer-restriction families: from a depth up, up to a depth,
    exactly one depth, and one type; one CV run per filter."""
    info = group_info or plan.group_info
    if info is None:
        raise ValueError("layer-subset experiments need group depth/type tags")
    depths = sorted({d for d, _ in info.values()})
    types = sorted({t for _, t in info.values()})
    filters = [FeatureFilter(kind="from-depth-up", depth=d) for d in depths]
    filters += [FeatureFilter(kind="up-to-depth", depth=d) for d in depths]
    filters += [FeatureFilter(kind="exactly-depth", depth=d) for d in depths]
    filters += [FeatureFilter(kind="by-type", type_tag=t) for t in types]
    results = {}
    for f in filters:
        sub_plan = replace(plan, feature_filter=f, group_info=info)
        results[f.name] = run_cv_training(sub_plan, stacks, dataset)
    return results


def write_run_dir(result: ExperimentResult, outdir) -> None:
    """Materialize a run: plan copy, per-cell models, long-format surfaces CSV."""
    import csv

    os.makedirs(outdir, exist_ok=True)
    save_plan(result.plan, os.path.join(outdir, "plan.yaml"))
    with open(os.path.join(outdir, "surfaces.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["filter", "lambda", "held_out", "surface", "value"]
        )
        writer.writeheader()
        for row in result.surface_rows():
            writer.writerow(row)
    models_dir = os.path.join(outdir, "models")
    os.makedirs(models_dir, exist_ok=True)
    for (fname, lam, held), cell in sorted(result.cells.items()):
        safe = fname.replace("=", "-").replace(",", "_").replace("/", "_")
        path = os.path.join(models_dir, f"{safe}_lam{lam:g}_holdout{held}.json")
        save_model(cell.model, path)
        cell.trace.to_csv(path.replace(".json", "_trace.csv"))
