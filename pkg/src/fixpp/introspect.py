"""Model introspection: which features carry the weight, and where they fire.

Features are ranked by |w_k|; for each, the most extreme responses across a
stack collection are located (largest for positive weights, smallest for
negative ones) and mapped back to image-pixel patches via the stacks'
receptive-field geometry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .featstack import FeatureStack
from .model import SaliencyModel


@dataclass
class PatchHit:
    image_id: str
    grid_x: int
    grid_y: int
    response: float
    # bounding box in image pixels, [x0, y0, x1, y1), clamped to the image
    box: tuple[int, int, int, int]


@dataclass
class FeatureReport:
    name: str
    weight: float
    relative_weight: float  # |w| / max_k |w|
    sign: int
    top_responses: list[PatchHit]


def top_features(model: SaliencyModel, n: int) -> list[str]:
    """The n features with largest |w_k|; ties break by feature name order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    names = model.feature_names
    if n > len(names):
        raise ValueError(f"asked for {n} of {len(names)} features")
    order = sorted(range(len(names)), key=lambda i: (-abs(model.weights[i]), names[i]))
    return [names[i] for i in order[:n]]


def _rf_box(
    meta, grid_x: int, grid_y: int, image_size: tuple[int, int]
) -> tuple[int, int, int, int]:
    w, h = image_size
    cx = meta.rf_offset + grid_x * meta.rf_stride
    cy = meta.rf_offset + grid_y * meta.rf_stride
    half = meta.rf_size / 2.0
    x0 = int(np.clip(round(cx - half), 0, w))
    x1 = int(np.clip(round(cx + half), 0, w))
    y0 = int(np.clip(round(cy - half), 0, h))
    y1 = int(np.clip(round(cy + half), 0, h))
    return (x0, y0, x1, y1)


def max_response_patches(
    feature: str,
    stacks: Sequence[FeatureStack],
    image_sizes: dict[str, tuple[int, int]],
    k: int,
    negative: bool = False,
) -> list[PatchHit]:
    """The k most extreme response locations, at most one per image.

    `negative` selects smallest responses (for negative-weight features).
    Results sort by extremity; ties break by (image_id, y, x).
    """
    candidates = []
    for stack in stacks:
        idx = stack.feature_index(feature)
        values = stack.features[idx]
        flat = np.argmin(values) if negative else np.argmax(values)
        y, x = np.unravel_index(flat, values.shape)
        meta = stack.feature_meta[idx]
        size = image_sizes[stack.image_id]
        candidates.append(
            PatchHit(
                image_id=stack.image_id,
                grid_x=int(x),
                grid_y=int(y),
                response=float(values[y, x]),
                box=_rf_box(meta, int(x), int(y), size),
            )
        )
    sign = 1.0 if negative else -1.0
    candidates.sort(key=lambda h: (sign * h.response, h.image_id, h.grid_y, h.grid_x))
    return candidates[:k]


def feature_report(
    model: SaliencyModel,
    feature: str,
    stacks: Sequence[FeatureStack],
    image_sizes: dict[str, tuple[int, int]],
    patches: int,
) -> FeatureReport:
    idx = model.feature_names.index(feature)
    weight = float(model.weights[idx])
    max_abs = float(np.max(np.abs(model.weights)))
    return FeatureReport(
        name=feature,
        weight=weight,
        relative_weight=abs(weight) / max_abs if max_abs > 0 else 0.0,
        sign=-1 if weight < 0 else 1,
        top_responses=max_response_patches(
            feature, stacks, image_sizes, patches, negative=weight < 0
        ),
    )


def response_overlay(feature: str, stack: FeatureStack):
    """The raw response map and its argmax (first in row-major order on ties)."""
    idx = stack.feature_index(feature)
    values = stack.features[idx]
    y, x = np.unravel_index(np.argmax(values), values.shape)
    overlay = FeatureStack(
        image_id=stack.image_id,
        features=values[None, :, :].copy(),
        feature_meta=[stack.feature_meta[idx]],
    )
    return overlay, (int(x), int(y))


def write_report_jsonl(reports: Sequence[FeatureReport], path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r)) + "\n")
