"""Self-contained multi-scale filter-bank feature extractor.

Produces intensity, color-opponency, oriented-edge and center-surround
response maps as a FeatureStack, so the full training/evaluation pipeline
runs without any external network.

Kernel formulas (so the convolution oracle is reproducible):

* oriented, size k, orientation theta, half = (k-1)/2:
    envelope  G(x, y) = exp(-(x^2 + y^2) / (2 * (0.4 * half)^2))
    even      G * cos(2 pi x' / (k / 2)),  x' = x cos(theta) + y sin(theta)
    odd       G * sin(2 pi x' / (k / 2))
  both are mean-subtracted (exact zero DC) and L2-normalized.
* center-surround, size k: difference of two L1-normalized Gaussians with
  sigma_center = half / 3 and sigma_surround = 2 * sigma_center (zero DC).

Signed filters are applied to the mean-removed intensity channel and split
into two half-wave rectified channels. Convolutions are full-type with zero
padding; all maps are then rescaled to the finest-scale grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .featstack import FeatureMeta, FeatureStack, rescale_map

FILTER_TYPES = ("intensity", "color", "oriented", "center-surround")


@dataclass
class FilterBankSpec:
    scales: list[int] = field(default_factory=lambda: [1, 2])
    orientations: int = 4
    include: tuple[str, ...] = FILTER_TYPES
    oriented_kernel_size: int = 7
    cs_kernel_sizes: list[int] = field(default_factory=lambda: [7])

    def __post_init__(self):
        if not self.scales or any(s < 1 for s in self.scales):
            raise ValueError("need at least one scale, all >= 1")
        unknown = set(self.include) - set(FILTER_TYPES)
        if unknown:
            raise ValueError(f"unknown filter types: {sorted(unknown)}")
        if "oriented" in self.include and self.orientations < 1:
            raise ValueError("orientations must be >= 1 when oriented filters are on")
        for k in [self.oriented_kernel_size, *self.cs_kernel_sizes]:
            if k < 3 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 3, got {k}")

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "orientations": self.orientations,
            "include": list(self.include),
            "oriented_kernel_size": self.oriented_kernel_size,
            "cs_kernel_sizes": list(self.cs_kernel_sizes),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FilterBankSpec":
        return cls(
            scales=list(doc.get("scales", [1, 2])),
            orientations=int(doc.get("orientations", 4)),
            include=tuple(doc.get("include", FILTER_TYPES)),
            oriented_kernel_size=int(doc.get("oriented_kernel_size", 7)),
            cs_kernel_sizes=list(doc.get("cs_kernel_sizes", [7])),
        )


def load_spec(path) -> FilterBankSpec:
    import yaml

    with open(path) as fh:
        return FilterBankSpec.from_dict(yaml.safe_load(fh) or {})


def gabor_pair(size: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature (even, odd) oriented kernels, zero-DC and unit L2 norm."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    y, x = np.meshgrid(coords, coords, indexing="ij")
    rotated = x * math.cos(theta) + y * math.sin(theta)
    envelope = np.exp(-(x * x + y * y) / (2.0 * (0.4 * half) ** 2))
    wavelength = size / 2.0
    even = envelope * np.cos(2.0 * np.pi * rotated / wavelength)
    odd = envelope * np.sin(2.0 * np.pi * rotated / wavelength)
    even -= even.mean()
    odd -= odd.mean()
    return even / np.linalg.norm(even), odd / np.linalg.norm(odd)


def dog_kernel(size: int) -> np.ndarray:
    """Center-surround difference of Gaussians, zero-DC."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    y, x = np.meshgrid(coords, coords, indexing="ij")
    r2 = x * x + y * y
    sigma_c = max(half / 3.0, 0.5)
    center = np.exp(-r2 / (2.0 * sigma_c**2))
    surround = np.exp(-r2 / (2.0 * (2.0 * sigma_c) ** 2))
    kernel = center / center.sum() - surround / surround.sum()
    return kernel / np.linalg.norm(kernel)


def conv_full(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Full-type zero-padded 2-D convolution (output grows by kernel-1)."""
    return convolve2d(channel, kernel, mode="full", boundary="fill", fillvalue=0.0)


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downsampling; trailing partial blocks average what exists."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if factor == 1:
        return np.asarray(image, dtype=np.float64).copy()
    out = np.asarray(image, dtype=np.float64)
    for axis in range(2):
        n = out.shape[axis]
        starts = np.arange(0, n, factor)
        sums = np.add.reduceat(out, starts, axis=axis)
        sizes = np.minimum(starts + factor, n) - starts
        shape = [1] * out.ndim
        shape[axis] = len(starts)
        out = sums / sizes.reshape(shape)
    return out


@dataclass
class RawFeature:
    """A native-resolution response map before common-grid rescaling."""

    name: str
    group: str
    values: np.ndarray
    scale: int
    kernel_size: int


def _halfwave(name: str, group: str, values: np.ndarray, scale: int, k: int):
    return [
        RawFeature(f"{name}_pos", group, np.maximum(values, 0.0), scale, k),
        RawFeature(f"{name}_neg", group, np.maximum(-values, 0.0), scale, k),
    ]


def extract_raw(image: np.ndarray, spec: FilterBankSpec) -> list[RawFeature]:
    """Per-scale, per-filter native response maps for one RGB image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) RGB image")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image has a zero dimension")
    rgb = image.astype(np.float64) / 255.0
    out: list[RawFeature] = []
    for scale in sorted(spec.scales):
        small = downsample(rgb, scale)
        r, g, b = small[..., 0], small[..., 1], small[..., 2]
        intensity = (r + g + b) / 3.0
        # bandpass filters see the mean-removed channel, so a flat input
        # yields exactly zero response despite the zero padding
        centered = intensity - intensity.mean()
        if "intensity" in spec.include:
            out.append(
                RawFeature(f"intensity_s{scale}", f"intensity_s{scale}",
                           intensity.copy(), scale, 1)
            )
        if "color" in spec.include:
            group = f"color_s{scale}"
            out += _halfwave(f"{group}_rg", group, r - g, scale, 1)
            out += _halfwave(f"{group}_by", group, b - (r + g) / 2.0, scale, 1)
        if "oriented" in spec.include:
            group = f"oriented_s{scale}"
            k = spec.oriented_kernel_size
            for i in range(spec.orientations):
                theta = i * np.pi / spec.orientations
                even, odd = gabor_pair(k, theta)
                out += _halfwave(
                    f"{group}_o{i}_even", group, conv_full(centered, even), scale, k
                )
                out += _halfwave(
                    f"{group}_o{i}_odd", group, conv_full(centered, odd), scale, k
                )
        if "center-surround" in spec.include:
            group = f"cs_s{scale}"
            for k in spec.cs_kernel_sizes:
                out += _halfwave(
                    f"{group}_k{k}", group, conv_full(centered, dog_kernel(k)),
                    scale, k,
                )
    return out


def _geometry(
    raw: RawFeature, image_shape: tuple[int, int], grid_shape: tuple[int, int]
) -> FeatureMeta:
    """Receptive-field metadata on the common grid.

    A native cell j of a full convolution covers downsampled coords
    [j-k+1, j], center j - (k-1)/2; mapping native -> common is the
    bilinear cell-center alignment of the rescaler.
    """
    native_h = raw.values.shape[0]
    stride_eff = native_h * raw.scale / grid_shape[0]
    offset = 0.5 * stride_eff - raw.scale * (raw.kernel_size - 1) / 2.0
    return FeatureMeta(
        name=raw.name,
        group=raw.group,
        rf_size=max(1, raw.kernel_size * raw.scale),
        rf_stride=max(1, round(stride_eff)),
        rf_offset=round(offset),
    )


def extract(image: np.ndarray, spec: FilterBankSpec, image_id: str) -> FeatureStack:
    """Filter-bank feature stack on the finest-scale grid."""
    image = np.asarray(image)
    raws = extract_raw(image, spec)
    min_scale = min(spec.scales)
    grid_h = math.ceil(image.shape[0] / min_scale)
    grid_w = math.ceil(image.shape[1] / min_scale)
    features = np.empty((len(raws), grid_h, grid_w))
    meta = []
    for i, raw in enumerate(raws):
        features[i] = rescale_map(raw.values, grid_h, grid_w)
        meta.append(_geometry(raw, image.shape[:2], (grid_h, grid_w)))
    return FeatureStack(image_id=image_id, features=features, feature_meta=meta)


def group_info(groups) -> dict[str, tuple[int, str]]:
    """Depth/type tags parsed from '<type>_s<scale>' group names."""
    info = {}
    for g in sorted(set(groups)):
        head, _, tail = g.rpartition("_s")
        if not head or not tail.isdigit():
            raise ValueError(f"cannot parse depth from group name {g!r}")
        info[g] = (int(tail), head)
    return info
