"""Feature stacks: aligned response maps for one image, plus dataset normalization.

A stack holds K real-valued maps on a common grid together with per-feature
receptive-field geometry, so downstream analysis can map grid cells back to
image pixels. Stacks are rescaled to a common grid with bilinear interpolation
and normalized to unit standard deviation pooled over a whole dataset.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

FSTK_MAGIC = b"FSTK"
FSTK_VERSION = 1


class StackFormatError(ValueError):
    """Raised when a feature-stack file is malformed."""


@dataclass(frozen=True)
class FeatureMeta:
    """Geometry and identity of one feature map.

    rf_size/rf_stride/rf_offset describe, in image pixels, the receptive
    field of a grid cell: center = rf_offset + cell * rf_stride, extent
    rf_size. `degenerate` marks features whose dataset std is zero.
    """

    name: str
    group: str
    rf_size: int = 1
    rf_stride: int = 1
    rf_offset: int = 0
    degenerate: bool = False

    def __post_init__(self):
        if self.rf_size < 1:
            raise ValueError(f"rf_size must be >= 1, got {self.rf_size}")
        if self.rf_stride < 1:
            raise ValueError(f"rf_stride must be >= 1, got {self.rf_stride}")


@dataclass
class FeatureStack:
    """K spatially aligned feature maps for one image.

    `features` has shape (K, height, width), float64 in memory. Values must
    be finite and feature names unique.
    """

    image_id: str
    features: np.ndarray
    feature_meta: list[FeatureMeta]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError("features must have shape (K, height, width)")
        k = self.features.shape[0]
        if k != len(self.feature_meta):
            raise ValueError(
                f"{k} maps but {len(self.feature_meta)} metadata records"
            )
        if not np.all(np.isfinite(self.features)):
            bad = np.argwhere(~np.isfinite(self.features))[0]
            raise ValueError(
                f"non-finite value in feature {bad[0]} at pixel ({bad[1]}, {bad[2]})"
            )
        names = [m.name for m in self.feature_meta]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique within a stack")

    @property
    def n_features(self) -> int:
        return self.features.shape[0]

    @property
    def height(self) -> int:
        return self.features.shape[1]

    @property
    def width(self) -> int:
        return self.features.shape[2]

    @property
    def feature_names(self) -> list[str]:
        return [m.name for m in self.feature_meta]

    def feature_index(self, name: str) -> int:
        for i, m in enumerate(self.feature_meta):
            if m.name == name:
                return i
        raise KeyError(f"no feature named {name!r}")

    def select(self, names: Sequence[str]) -> "FeatureStack":
        """Sub-stack holding the given features, in the given order."""
        idx = [self.feature_index(n) for n in names]
        return FeatureStack(
            image_id=self.image_id,
            features=self.features[idx].copy(),
            feature_meta=[self.feature_meta[i] for i in idx],
        )


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature pooled mean and population std over a dataset.

    `fingerprint` is a deterministic hash of the contributing image ids.
    """

    mean: dict[str, float]
    std: dict[str, float]
    fingerprint: str

    def __post_init__(self):
        for name, s in self.std.items():
            if s < 0:
                raise ValueError(f"negative std for feature {name!r}")
            if name not in self.mean:
                raise ValueError(f"std entry {name!r} has no mean entry")


def dataset_fingerprint(image_ids: Iterable[str]) -> str:
    h = hashlib.sha256()
    for image_id in sorted(image_ids):
        h.update(image_id.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def _bilinear_axis_coords(n_src: int, n_tgt: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and blend weights for one axis, cell centers aligned.

    Edge clamping: source positions outside [0, n_src-1] clamp to the border.
    """
    pos = (np.arange(n_tgt, dtype=np.float64) + 0.5) * (n_src / n_tgt) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    return lo, hi, frac


def rescale_map(src: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear rescale of one 2-D map to (height, width) with edge clamping.

    A map already at the target dims is returned value-identical.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2 or src.size == 0:
        raise ValueError("input map must be a nonempty 2-D array")
    if height < 1 or width < 1:
        raise ValueError("target dimensions must be >= 1")
    if src.shape == (height, width):
        return src.copy()
    ylo, yhi, fy = _bilinear_axis_coords(src.shape[0], height)
    xlo, xhi, fx = _bilinear_axis_coords(src.shape[1], width)
    fy = fy[:, None]
    fx = fx[None, :]
    top = src[np.ix_(ylo, xlo)] * (1.0 - fx) + src[np.ix_(ylo, xhi)] * fx
    bot = src[np.ix_(yhi, xlo)] * (1.0 - fx) + src[np.ix_(yhi, xhi)] * fx
    return top * (1.0 - fy) + bot * fy


def rescale_to_common_grid(
    image_id: str,
    maps: Sequence[tuple[np.ndarray, FeatureMeta]],
    height: int,
    width: int,
) -> FeatureStack:
    """Rescale a list of (map, meta) pairs onto a common grid as one stack."""
    if not maps:
        raise ValueError("empty map list")
    if height < 1 or width < 1:
        raise ValueError("target dimensions must be >= 1")
    out = np.empty((len(maps), height, width), dtype=np.float64)
    meta = []
    for i, (m, fm) in enumerate(maps):
        out[i] = rescale_map(m, height, width)
        meta.append(fm)
    return FeatureStack(image_id=image_id, features=out, feature_meta=meta)


def compute_norm_stats(stacks: Iterable[FeatureStack]) -> NormalizationStats:
    """Pooled per-feature mean and population std over all pixels of all stacks.

    Deterministic: stacks are reduced in sorted image_id order with a two-pass
    (mean, then centered second moment) accumulation.
    """
    stacks = sorted(stacks, key=lambda s: s.image_id)
    if not stacks:
        raise ValueError("at least one stack is required")
    names = stacks[0].feature_names
    for s in stacks[1:]:
        if s.feature_names != names:
            raise ValueError(
                f"stack {s.image_id!r} has a different feature set than "
                f"{stacks[0].image_id!r}"
            )
    k = len(names)
    total = np.zeros(k)
    count = 0
    for s in stacks:
        total += s.features.reshape(k, -1).sum(axis=1)
        count += s.height * s.width
    mean = total / count
    sq = np.zeros(k)
    for s in stacks:
        centered = s.features.reshape(k, -1) - mean[:, None]
        sq += (centered * centered).sum(axis=1)
    std = np.sqrt(sq / count)
    return NormalizationStats(
        mean={n: float(m) for n, m in zip(names, mean)},
        std={n: float(v) for n, v in zip(names, std)},
        fingerprint=dataset_fingerprint(s.image_id for s in stacks),
    )


def normalize(stack: FeatureStack, stats: NormalizationStats) -> FeatureStack:
    """Divide each map by its dataset std (scale-only, mean untouched).

    Features with std == 0 pass through unchanged and are flagged degenerate.
    """
    out = stack.features.copy()
    meta = []
    for i, m in enumerate(stack.feature_meta):
        if m.name not in stats.std:
            raise KeyError(f"no normalization stats for feature {m.name!r}")
        s = stats.std[m.name]
        if s == 0.0:
            meta.append(replace(m, degenerate=True))
        else:
            out[i] /= s
            meta.append(m)
    return FeatureStack(image_id=stack.image_id, features=out, feature_meta=meta)


def _write_str(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def write_stack(stack: FeatureStack, path) -> None:
    """Serialize a stack to the FSTK container (float32 payload)."""
    buf = bytearray()
    buf += FSTK_MAGIC
    buf += struct.pack(
        "<IIII", FSTK_VERSION, stack.n_features, stack.height, stack.width
    )
    for m in stack.feature_meta:
        _write_str(buf, m.name)
        _write_str(buf, m.group)
        buf += struct.pack(
            "<IIiB", m.rf_size, m.rf_stride, m.rf_offset, 1 if m.degenerate else 0
        )
    buf += stack.features.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise StackFormatError("truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_stack(path, image_id: str | None = None) -> FeatureStack:
    """Read an FSTK file, validating magic, version and payload finiteness."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != FSTK_MAGIC:
        raise StackFormatError(f"bad magic in {path}")
    version = r.u32()
    if version != FSTK_VERSION:
        raise StackFormatError(f"unsupported version {version} in {path}")
    k, height, width = r.u32(), r.u32(), r.u32()
    meta = []
    for _ in range(k):
        name = r.string()
        group = r.string()
        rf_size, rf_stride, rf_offset, degenerate = (
            r.u32(),
            r.u32(),
            r.i32(),
            r.u8(),
        )
        meta.append(
            FeatureMeta(
                name=name,
                group=group,
                rf_size=rf_size,
                rf_stride=rf_stride,
                rf_offset=rf_offset,
                degenerate=bool(degenerate),
            )
        )
    payload = np.frombuffer(r.take(k * height * width * 4), dtype="<f4")
    if r.pos != len(data):
        raise StackFormatError(f"trailing bytes in {path}")
    features = payload.reshape(k, height, width)
    bad = ~np.isfinite(features)
    if bad.any():
        fi, y, x = np.argwhere(bad)[0]
        raise StackFormatError(
            f"non-finite value in feature {fi} at pixel ({y}, {x}) of {path}"
        )
    if image_id is None:
        image_id = _stem(path)
    return FeatureStack(
        image_id=image_id,
        features=features.astype(np.float64),
        feature_meta=meta,
    )


def _stem(path) -> str:
    import os

    base = os.path.basename(str(path))
    if base.endswith(".fstk"):
        base = base[: -len(".fstk")]
    return base
