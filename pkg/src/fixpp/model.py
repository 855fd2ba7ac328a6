"""Forward saliency model and training objective.

Pipeline per image: linear feature readout -> Gaussian blur -> additive
center-bias log-density -> softmax over the grid. Training minimizes the mean
negative log-likelihood of fixations plus a sparsity penalty lambda *
||w||_1 / ||w||_2, jointly over (w, log sigma, alpha).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .blur import SeparableBlur
from .dataset import FixationDataset, Fixation, count_map, fixation_cells
from .featstack import FeatureMeta, FeatureStack, NormalizationStats, normalize

LN2 = float(np.log(2.0))

# exp(-700) is comfortably above the subnormal range, so density cells stay
# strictly positive floats while their logs remain exact.
LOG_FLOOR = -700.0

#: smoothing half-width of the |w| surrogate in the sparsity penalty
REG_EPSILON = 1e-8


@dataclass
class DensityMap:
    """Strictly positive grid summing to one, with exact cached logs."""

    grid: np.ndarray
    log_grid: np.ndarray

    @classmethod
    def from_log(cls, log_values: np.ndarray) -> "DensityMap":
        log_values = np.asarray(log_values, dtype=np.float64)
        if not np.all(np.isfinite(log_values)):
            raise ValueError("log-density values must be finite")
        flat = log_values.ravel()
        m = flat.max()
        log_z = m + np.log(np.exp(flat - m).sum())
        log_grid = np.maximum(log_values - log_z, LOG_FLOOR)
        grid = np.exp(log_grid)
        s = grid.sum()
        grid /= s
        log_grid = log_grid - np.log(s)
        return cls(grid=grid, log_grid=log_grid)

    @classmethod
    def from_grid(cls, values: np.ndarray) -> "DensityMap":
        values = np.asarray(values, dtype=np.float64)
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite and nonnegative")
        total = values.sum()
        if total <= 0:
            raise ValueError("density values sum to zero")
        with np.errstate(divide="ignore"):
            return cls.from_log(np.log(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def log_at(self, cells: np.ndarray) -> np.ndarray:
        """Log-density at (row, col) cells, shape (n, 2)."""
        return self.log_grid[cells[:, 0], cells[:, 1]]


def uniform_density(height: int, width: int) -> DensityMap:
    return DensityMap.from_log(np.zeros((height, width)))


@dataclass
class SaliencyModel:
    """Trained readout: feature weights, blur width, and center-bias weight."""

    weights: np.ndarray
    blur_sigma: float
    center_weight: float
    stats: NormalizationStats
    feature_meta: list[FeatureMeta]
    lambda_used: float = 0.0
    epsilon: float = REG_EPSILON
    training_split: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be positive")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if len(self.weights) != len(self.feature_meta):
            raise ValueError("one weight per feature is required")
        for w, m in zip(self.weights, self.feature_meta):
            if m.degenerate and w != 0.0:
                raise ValueError(f"degenerate feature {m.name!r} must have weight 0")

    @property
    def feature_names(self) -> list[str]:
        return [m.name for m in self.feature_meta]


def saliency_map(stack: FeatureStack, weights: np.ndarray, sigma: float) -> np.ndarray:
    """Blurred linear readout over a normalized stack."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != stack.n_features:
        raise ValueError(
            f"{len(weights)} weights for {stack.n_features} features"
        )
    u = np.tensordot(weights, stack.features, axes=1)
    return SeparableBlur(stack.height, stack.width, sigma).apply(u)


def combine_center_bias(
    saliency: np.ndarray, center_log_density: np.ndarray, alpha: float
) -> np.ndarray:
    if saliency.shape != center_log_density.shape:
        raise ValueError(
            f"saliency {saliency.shape} vs center bias {center_log_density.shape}"
        )
    return alpha * center_log_density + saliency


def softmax_density(output: np.ndarray) -> DensityMap:
    """Max-subtracted softmax of the model output; shift-invariant."""
    output = np.asarray(output, dtype=np.float64)
    if not np.all(np.isfinite(output)):
        raise ValueError("model output must be finite")
    return DensityMap.from_log(output)


def predict(
    model: SaliencyModel, stack: FeatureStack, prior: DensityMap
) -> DensityMap:
    """Full pipeline on a raw stack: normalize, read out, blur, bias, softmax."""
    if stack.feature_names != model.feature_names:
        raise ValueError("stack features do not match the model")
    normalized = normalize(stack, model.stats)
    if (stack.height, stack.width) != prior.shape:
        raise ValueError("prior grid does not match the stack grid")
    s = saliency_map(normalized, model.weights, model.blur_sigma)
    o = combine_center_bias(s, prior.log_grid, model.center_weight)
    return softmax_density(o)


def density_log_likelihood(
    density: DensityMap,
    fixations: Sequence[Fixation],
    image_size: tuple[int, int],
) -> float:
    """Mean log-density (nats/fixation) at the fixations' grid cells."""
    if not fixations:
        raise ValueError("no fixations to score")
    cells = fixation_cells(fixations, image_size, density.shape)
    return float(density.log_at(cells).mean())


def log_likelihood(
    model: SaliencyModel,
    stack: FeatureStack,
    fixations: Sequence[Fixation],
    prior: DensityMap,
    image_size: tuple[int, int],
    unit: str = "nats",
) -> float:
    """Mean fixation log-likelihood for one image, in nats or bits."""
    value = density_log_likelihood(predict(model, stack, prior), fixations, image_size)
    if unit == "nats":
        return value
    if unit == "bits":
        return value / LN2
    raise ValueError(f"unknown unit {unit!r}")


@dataclass
class CostBreakdown:
    """Training objective value and its analytic gradient."""

    nll: float
    reg: float
    lam: float
    gradient: np.ndarray

    @property
    def total(self) -> float:
        return self.nll + self.lam * self.reg


@dataclass
class ImageTerm:
    """Precomputed per-image quantities for the training objective."""

    image_id: str
    features: np.ndarray  # (K, H, W) normalized responses
    fix_counts: np.ndarray  # (H, W) fixation counts
    log_prior: np.ndarray  # (H, W) center-bias log-density
    n_fix: int


@dataclass
class TrainingData:
    terms: list[ImageTerm]
    n_total: int
    grid_shape: tuple[int, int]
    n_features: int


def build_training_data(
    stacks: dict[str, FeatureStack],
    dataset: FixationDataset,
    fixations: Sequence[Fixation],
    priors: dict[str, DensityMap],
) -> TrainingData:
    """Group fixations by image and cache count maps and log-priors.

    `stacks` must already be normalized. Images without fixations in the
    given set are skipped. Image order is fixed (sorted id) so reductions
    are bit-reproducible.
    """
    by_image: dict[str, list[Fixation]] = {}
    for f in fixations:
        by_image.setdefault(f.image_id, []).append(f)
    terms = []
    n_total = 0
    grid_shape = None
    n_features = None
    for image_id in sorted(by_image):
        stack = stacks[image_id]
        if grid_shape is None:
            grid_shape = (stack.height, stack.width)
            n_features = stack.n_features
        elif (stack.height, stack.width) != grid_shape:
            raise ValueError("all training stacks must share one grid size")
        size = dataset.image_sizes[image_id]
        counts = count_map(by_image[image_id], size, grid_shape)
        prior = priors[image_id]
        if prior.shape != grid_shape:
            raise ValueError(f"prior for {image_id!r} is not on the model grid")
        terms.append(
            ImageTerm(
                image_id=image_id,
                features=stack.features,
                fix_counts=counts,
                log_prior=prior.log_grid,
                n_fix=len(by_image[image_id]),
            )
        )
        n_total += len(by_image[image_id])
    if n_total == 0:
        raise ValueError("empty fixation set")
    return TrainingData(
        terms=terms,
        n_total=n_total,
        grid_shape=grid_shape,
        n_features=n_features,
    )


def pack_params(weights: np.ndarray, sigma: float, alpha: float) -> np.ndarray:
    return np.concatenate([np.asarray(weights, dtype=np.float64), [np.log(sigma), alpha]])


def unpack_params(params: np.ndarray) -> tuple[np.ndarray, float, float]:
    params = np.asarray(params, dtype=np.float64)
    return params[:-2], float(np.exp(params[-2])), float(params[-1])


def sparsity_penalty(weights: np.ndarray, epsilon: float = REG_EPSILON):
    """||w||_1 / ||w||_2 with |w_i| smoothed to sqrt(w_i^2 + eps^2).

    Returns (value, gradient); defined as 0 with zero gradient at w = 0.
    """
    w = np.asarray(weights, dtype=np.float64)
    l2 = float(np.sqrt((w * w).sum()))
    if l2 == 0.0:
        return 0.0, np.zeros_like(w)
    smooth_abs = np.sqrt(w * w + epsilon * epsilon)
    l1 = float(smooth_abs.sum())
    value = l1 / l2
    grad = (w / smooth_abs) / l2 - l1 * w / l2**3
    return value, grad


def cost_and_gradient(
    params: np.ndarray,
    data: TrainingData,
    lam: float,
    pin_mask: np.ndarray | None = None,
) -> CostBreakdown:
    """Mean NLL over all pooled fixations plus the sparsity penalty.

    Gradient is analytic over (w, log sigma, alpha); the sigma part chains
    the exact derivative of every renormalized kernel entry through the
    convolution. `pin_mask` marks weights held at zero (their gradient
    entries are zeroed), used for degenerate features.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    weights, sigma, alpha = unpack_params(params)
    if len(weights) != data.n_features:
        raise ValueError("parameter vector does not match the feature count")
    height, width = data.grid_shape
    op = SeparableBlur(height, width, sigma)

    nll = 0.0
    grad_w = np.zeros_like(weights)
    grad_sigma = 0.0
    grad_alpha = 0.0
    inv_n = 1.0 / data.n_total
    for term in data.terms:
        u = np.tensordot(weights, term.features, axes=1)
        s = op.apply(u)
        o = alpha * term.log_prior + s
        flat = o.ravel()
        m = flat.max()
        log_z = m + np.log(np.exp(flat - m).sum())
        log_q = o - log_z
        nll -= float((term.fix_counts * log_q).sum()) * inv_n

        # d nll / d o for this image, already scaled by 1/N
        upstream = (term.n_fix * np.exp(log_q) - term.fix_counts) * inv_n
        grad_alpha += float((upstream * term.log_prior).sum())
        back = op.adjoint(upstream)
        grad_w += np.tensordot(term.features, back, axes=([1, 2], [0, 1]))
        grad_sigma += float((upstream * op.sigma_derivative(u)).sum())

    reg, reg_grad = sparsity_penalty(weights)
    grad_w += lam * reg_grad
    if pin_mask is not None:
        grad_w = np.where(pin_mask, 0.0, grad_w)
    gradient = np.concatenate([grad_w, [grad_sigma * sigma, grad_alpha]])
    return CostBreakdown(nll=nll, reg=reg, lam=lam, gradient=gradient)


MODEL_FORMAT = "saliency-model/1"


def save_model(model: SaliencyModel, path) -> None:
    """Write a model as a self-describing key-value (JSON) text document."""
    doc = {
        "format": MODEL_FORMAT,
        "weights": [float(w) for w in model.weights],
        "blur_sigma": model.blur_sigma,
        "center_weight": model.center_weight,
        "lambda_used": model.lambda_used,
        "epsilon": model.epsilon,
        "feature_names": model.feature_names,
        "feature_groups": [m.group for m in model.feature_meta],
        "feature_geometry": [
            [m.rf_size, m.rf_stride, m.rf_offset, int(m.degenerate)]
            for m in model.feature_meta
        ],
        "stats_mean": model.stats.mean,
        "stats_std": model.stats.std,
        "stats_fingerprint": model.stats.fingerprint,
        "training_split": model.training_split,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> SaliencyModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a saliency model file: {path}")
    meta = [
        FeatureMeta(
            name=name,
            group=group,
            rf_size=geo[0],
            rf_stride=geo[1],
            rf_offset=geo[2],
            degenerate=bool(geo[3]),
        )
        for name, group, geo in zip(
            doc["feature_names"], doc["feature_groups"], doc["feature_geometry"]
        )
    ]
    stats = NormalizationStats(
        mean=doc["stats_mean"],
        std=doc["stats_std"],
        fingerprint=doc["stats_fingerprint"],
    )
    return SaliencyModel(
        weights=np.array(doc["weights"], dtype=np.float64),
        blur_sigma=doc["blur_sigma"],
        center_weight=doc["center_weight"],
        stats=stats,
        feature_meta=meta,
        lambda_used=doc["lambda_used"],
        epsilon=doc["epsilon"],
        training_split=doc.get("training_split", ""),
    )


def save_density(density: DensityMap, path) -> None:
    """Export a density as a single-map FSTK plus a sidecar with its sum.

    The payload is float32; the sidecar records the exact post-quantization
    sum so readers can renormalize.
    """
    from . import featstack as fs

    stack = FeatureStack(
        image_id="density",
        features=density.grid[None, :, :],
        feature_meta=[FeatureMeta(name="density", group="density")],
    )
    fs.write_stack(stack, path)
    quantized = density.grid.astype(np.float32).astype(np.float64)
    with open(str(path) + ".sum", "w") as fh:
        fh.write(f"sum={quantized.sum()!r}\n")


def load_density(path) -> DensityMap:
    from . import featstack as fs

    stack = fs.read_stack(path)
    if stack.n_features != 1 or stack.feature_meta[0].group != "density":
        raise ValueError(f"not a density container: {path}")
    return DensityMap.from_grid(stack.features[0])
