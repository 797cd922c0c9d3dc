"""Quantisation of attributes and packing into the 7 + N_k ten-bit maps, plus the inverse."""
from __future__ import annotations

import logging
from typing import Dict, Mapping

import numpy as np

from .errors import ContainerError, CorruptionError, RangeError, ShapeError
from .models import (
    ATTRIBUTE_BITS,
    COORD_BITS,
    GROUP_NAMES,
    MID_VALUE,
    AcCoefficients,
    AttributeMapSet,
    FeatureGrid,
    GaussianCloud,
    GridLayout,
    GroupRange,
    PcaModel,
    QuantizationParams,
    image_tags,
)
from .morton import filled_order, morton_scan_pixels
from .pca import reconstruct

LOGGER = logging.getLogger(__name__)

_HALF_BITS = COORD_BITS // 2
_HALF_MASK = (1 << _HALF_BITS) - 1
_SAMPLE_LIMIT = 1 << ATTRIBUTE_BITS


def compute_ranges(cloud: GaussianCloud, coeffs: AcCoefficients) -> QuantizationParams:
    """Per-channel min/max for every group; positions share one cubic box."""

    def channel_range(values: np.ndarray, bits: int) -> GroupRange:
        values = np.asarray(values, dtype=np.float64)
        return GroupRange(minimum=values.min(axis=0), maximum=values.max(axis=0), bits=bits)

    low = float(cloud.positions.min())
    high = float(cloud.positions.max())
    groups = {
        "positions": GroupRange(minimum=[low] * 3, maximum=[high] * 3, bits=COORD_BITS),
        "sh_dc": channel_range(cloud.sh_dc, ATTRIBUTE_BITS),
        "ac": channel_range(coeffs.coeffs, ATTRIBUTE_BITS),
        "opacity": channel_range(cloud.opacity, ATTRIBUTE_BITS),
        "scale": channel_range(cloud.scale, ATTRIBUTE_BITS),
        "rotation": channel_range(cloud.rotation, ATTRIBUTE_BITS),
    }
    return QuantizationParams(groups=groups)


def quantize(values: np.ndarray, group: GroupRange) -> np.ndarray:
    """round((v - min) / (max - min) * (2^bits - 1)), clamped; constant channels map to 0."""

    values = np.asarray(values, dtype=np.float64)
    span = group.maximum - group.minimum
    live = span > 0
    scaled = (values - group.minimum) / np.where(live, span, 1.0) * group.levels
    q = np.floor(np.clip(scaled, 0.0, group.levels) + 0.5)
    return np.where(live, q, 0.0).astype(np.int64)


def dequantize(q: np.ndarray, group: GroupRange) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    span = group.maximum - group.minimum
    live = span > 0
    values = group.minimum + q / group.levels * np.where(live, span, 0.0)
    return np.where(live, values, group.minimum)


def split_hi_lo(q20: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q20 = np.asarray(q20, dtype=np.int64)
    if q20.size and (q20.min() < 0 or q20.max() >= 1 << COORD_BITS):
        raise RangeError(f"coordinate samples must lie in [0, 2^{COORD_BITS})")
    return q20 >> _HALF_BITS, q20 & _HALF_MASK


def join_hi_lo(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    return (np.asarray(hi, dtype=np.int64) << _HALF_BITS) | np.asarray(lo, dtype=np.int64)


def quantize_groups(
    cloud: GaussianCloud, coeffs: AcCoefficients, params: QuantizationParams
) -> Dict[str, np.ndarray]:
    """Integer samples per group, in cloud order."""

    if coeffs.coeffs.shape[0] != cloud.n:
        raise ShapeError(f"{coeffs.coeffs.shape[0]} coefficient rows for {cloud.n} primitives")
    sources = {
        "positions": cloud.positions,
        "sh_dc": cloud.sh_dc,
        "ac": coeffs.coeffs,
        "opacity": cloud.opacity,
        "scale": cloud.scale,
        "rotation": cloud.rotation,
    }
    return {name: quantize(sources[name], params[name]) for name in GROUP_NAMES}


def dequantize_groups(
    quantized: Mapping[str, np.ndarray], params: QuantizationParams, pca: PcaModel
) -> GaussianCloud:
    """Rebuild a cloud from integer samples; the encoder reference and the decoder share this."""

    coeffs = dequantize(quantized["ac"], params["ac"])
    sh_ac = reconstruct(pca, AcCoefficients(coeffs=coeffs, k=coeffs.shape[1]))
    return GaussianCloud(
        positions=dequantize(quantized["positions"], params["positions"]).astype(np.float32),
        sh_dc=dequantize(quantized["sh_dc"], params["sh_dc"]).astype(np.float32),
        sh_ac=sh_ac.astype(np.float32),
        opacity=dequantize(quantized["opacity"], params["opacity"]).astype(np.float32),
        scale=dequantize(quantized["scale"], params["scale"]).astype(np.float32),
        rotation=dequantize(quantized["rotation"], params["rotation"]).astype(np.float32),
    )


def group_channels(k: int) -> list[tuple[str, int]]:
    """Feature width per group; coordinates enter as their hi and lo planes."""

    return [("positions", 6), ("sh_dc", 3), ("ac", k), ("opacity", 1), ("scale", 3), ("rotation", 4)]


def feature_matrix(quantized: Mapping[str, np.ndarray], params: QuantizationParams) -> np.ndarray:
    """(N, C) features in [0, 1]: the ten-bit samples the codec will see, per channel."""

    hi, lo = split_hi_lo(quantized["positions"])
    limit = float(_SAMPLE_LIMIT - 1)
    columns = [hi / limit, lo / limit]
    columns += [quantized[name] / float(params[name].levels) for name in GROUP_NAMES if name != "positions"]
    return np.concatenate(columns, axis=1)


def feature_weights(k: int, group_weights: Mapping[str, float] | None = None) -> np.ndarray:
    group_weights = group_weights or {}
    return np.concatenate(
        [np.full(width, float(group_weights.get(name, 1.0))) for name, width in group_channels(k)]
    )


def build_feature_grid(features: np.ndarray, layout: GridLayout, weights: np.ndarray) -> FeatureGrid:
    order = filled_order(layout)
    side = layout.side
    planes = np.ascontiguousarray(features[order].T).reshape(features.shape[1], side, side)
    return FeatureGrid(planes=planes, weights=weights)


def _pad(columns: np.ndarray, width: int = 3) -> np.ndarray:
    if columns.shape[1] == width:
        return columns
    filler = np.full((columns.shape[0], width - columns.shape[1]), MID_VALUE, dtype=columns.dtype)
    return np.concatenate([columns, filler], axis=1)


def assemble_quantized(
    quantized: Mapping[str, np.ndarray], layout: GridLayout, k: int
) -> AttributeMapSet:
    count = quantized["positions"].shape[0]
    if count != layout.n_real:
        raise ShapeError(f"layout holds {layout.n_real} primitives, cloud has {count}")
    if quantized["ac"].shape[1] != k:
        raise ShapeError(f"{quantized['ac'].shape[1]} AC channels for k={k}")

    order = filled_order(layout)
    side = layout.side
    hi, lo = split_hi_lo(quantized["positions"][order])
    ac = quantized["ac"][order]
    rotation = quantized["rotation"][order]

    planes: Dict[str, np.ndarray] = {
        "coord_hi": hi,
        "coord_lo": lo,
        "sh_dc": quantized["sh_dc"][order],
    }
    for t in range(k // 3):
        planes[f"ac_{t}"] = ac[:, 3 * t:3 * t + 3]
    planes["scale"] = quantized["scale"][order]
    planes["opacity"] = _pad(quantized["opacity"][order])
    planes["rot_0"] = rotation[:, :3]
    planes["rot_1"] = _pad(rotation[:, 3:])

    images = {
        tag: np.ascontiguousarray(planes[tag], dtype=np.uint16).reshape(side, side, 3)
        for tag in image_tags(k)
    }
    return AttributeMapSet(images=images, n_real=layout.n_real, side=side)


def assemble(
    cloud: GaussianCloud, coeffs: AcCoefficients, layout: GridLayout, params: QuantizationParams
) -> AttributeMapSet:
    if layout.n_real != cloud.n:
        raise ShapeError(f"layout holds {layout.n_real} primitives, cloud has {cloud.n}")
    return assemble_quantized(quantize_groups(cloud, coeffs, params), layout, coeffs.k)


def read_quantized(maps: AttributeMapSet, k: int) -> Dict[str, np.ndarray]:
    """Integer samples of the n_real cells, in 2D Morton scan order."""

    side = maps.side
    pixels = morton_scan_pixels(side)[: maps.n_real]
    cells: Dict[str, np.ndarray] = {}
    for tag in image_tags(k):
        image = maps.images.get(tag)
        if image is None:
            raise ContainerError(f"map set lacks image {tag}")
        if image.shape != (side, side, 3):
            raise ContainerError(f"image {tag} has shape {image.shape}, expected {(side, side, 3)}")
        if image.size and int(image.max()) >= _SAMPLE_LIMIT:
            raise CorruptionError(f"image {tag} holds samples beyond {ATTRIBUTE_BITS} bits")
        cells[tag] = image.reshape(side * side, 3)[pixels].astype(np.int64)

    ac_tags = [f"ac_{t}" for t in range(k // 3)]
    return {
        "positions": join_hi_lo(cells["coord_hi"], cells["coord_lo"]),
        "sh_dc": cells["sh_dc"],
        "ac": np.concatenate([cells[tag] for tag in ac_tags], axis=1),
        "opacity": cells["opacity"][:, :1],
        "scale": cells["scale"],
        "rotation": np.concatenate([cells["rot_0"], cells["rot_1"][:, :1]], axis=1),
    }


def disassemble(maps: AttributeMapSet, params: QuantizationParams, pca: PcaModel) -> GaussianCloud:
    """Decode n_real primitives in scan order; original file order is not restored."""

    quantized = read_quantized(maps, pca.k)
    LOGGER.debug("Read %d primitives from %d maps", maps.n_real, len(maps))
    return dequantize_groups(quantized, params, pca)
