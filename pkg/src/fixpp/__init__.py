"""Probabilistic fixation prediction over precomputed feature-map stacks.

Saliency models are trained as spatial point processes by regularized
maximum likelihood and evaluated with information gain, gold-standard
comparisons, AUC and shuffled AUC.
"""

from .dataset import Fixation, FixationDataset, read_fixation_csv
from .featstack import (
    FeatureMeta,
    FeatureStack,
    NormalizationStats,
    compute_norm_stats,
    normalize,
    read_stack,
    rescale_map,
    rescale_to_common_grid,
    write_stack,
)
from .model import (
    CostBreakdown,
    DensityMap,
    SaliencyModel,
    combine_center_bias,
    cost_and_gradient,
    load_model,
    log_likelihood,
    predict,
    saliency_map,
    save_model,
    softmax_density,
    uniform_density,
)
from .optimizer import OptimizerConfig, OptTrace, initialize_params, minimize

__all__ = [
    "Fixation",
    "FixationDataset",
    "read_fixation_csv",
    "FeatureMeta",
    "FeatureStack",
    "NormalizationStats",
    "compute_norm_stats",
    "normalize",
    "read_stack",
    "rescale_map",
    "rescale_to_common_grid",
    "write_stack",
    "CostBreakdown",
    "DensityMap",
    "SaliencyModel",
    "combine_center_bias",
    "cost_and_gradient",
    "load_model",
    "log_likelihood",
    "predict",
    "saliency_map",
    "save_model",
    "softmax_density",
    "uniform_density",
    "OptimizerConfig",
    "OptTrace",
    "initialize_params",
    "minimize",
]

__version__ = "0.1.0"
